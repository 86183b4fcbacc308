//! Codepoint tokenizer and a small pre-LN decoder-only transformer.
//!
//! A training example is `<bos> question <sep> answer <eos>`; the loss is
//! restricted to positions that predict answer tokens and `<eos>`, so the
//! model learns the answer conditioned on the question.

mod batch;
mod infer;
mod model;
mod vocab;

pub use batch::{encode_pair, encode_text, Batch, EncodedPair};
pub use infer::{argmax, generate, generate_ids, pair_nll, DecodeMode, Decoder, KvCache, StepModel};
pub use model::{
    batch_loss, causal_mask, forward_logits, graph_logits, graph_loss, AdapterBinding, AdapterWeights,
    BoundLayer, BoundModel, Layer, Model, ModelConfig, Projection, INIT_STD,
};
pub use vocab::{build_vocab, Vocab, BOS, EOS, N_RESERVED, PAD, SEP, UNK};
