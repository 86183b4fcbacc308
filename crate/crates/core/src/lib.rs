//! Severity-ordered curriculum fine-tuning of a tiny Arabic medical
//! question-answering language model, from text normalization to the
//! three-regime comparison report.

pub mod arabic_text;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lora;
pub mod seed;
pub mod severity;
pub mod tiny_lm;
pub mod trainer;

pub use error::{Error, Result};
