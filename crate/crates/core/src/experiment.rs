//! End-to-end regime comparison on one fixed corpus and evaluation split,
//! repeated over training seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{stage_split, train_eval_split, QaRecord};
use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, EvalReport, ReportLabel};
use crate::lora::{AdaptedModel, LoraConfig};
use crate::severity::{annotate_dataset, Lexicon};
use crate::tiny_lm::{build_vocab, Decoder, Model, ModelConfig, Vocab};
use crate::trainer::{finetune_curriculum, finetune_standard, pretrain, pretrain_sequences, TrainConfig, TrainLog, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_fraction: f64,
    /// seeds the train/eval split, shared by every run
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub eval: EvalConfig,
}

/// Records re-annotated with `lexicon`, split once for all runs.
pub struct PreparedData {
    pub train: Vec<QaRecord>,
    pub eval: Vec<QaRecord>,
    pub vocab: Vocab,
}

pub fn prepare(records: &[QaRecord], lexicon: &Lexicon, train_fraction: f64, split_seed: u64) -> Result<PreparedData> {
    let (annotated, _) = annotate_dataset(records, lexicon, false);
    let (train, eval) = train_eval_split(&annotated, train_fraction, split_seed)?;
    // the vocabulary covers both halves so evaluation never sees <unk>
    // for characters that training simply happened not to contain
    let vocab = build_vocab(&annotated)?;
    Ok(PreparedData { train, eval, vocab })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub pretrain_losses: Vec<f64>,
    pub reports: BTreeMap<TrainMode, EvalReport>,
    pub logs: BTreeMap<TrainMode, TrainLog>,
}

/// Trained models of one seed.
pub struct SeedModels {
    pub base: Model,
    pub standard: AdaptedModel,
    pub curriculum: AdaptedModel,
    pub pretrain_losses: Vec<f64>,
    pub standard_log: TrainLog,
    pub curriculum_log: TrainLog,
}

pub fn train_seed(data: &PreparedData, cfg: &ExperimentConfig, seed: u64) -> Result<SeedModels> {
    let mut mc = cfg.model.clone();
    mc.vocab_size = data.vocab.size();
    mc.seed = seed;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let lc = LoraConfig { seed, ..cfg.lora.clone() };
    let seqs = pretrain_sequences(&data.train, tc.pretrain_corpus, &data.vocab, mc.context_len, seed);
    let (base, pretrain_losses) = pretrain(mc, &seqs, &tc)?;
    let (standard, standard_log) = finetune_standard(&base, &data.train, &data.vocab, &tc, &lc)?;
    let partition = stage_split(&data.train)?;
    let (curriculum, curriculum_log) = finetune_curriculum(&base, &partition, &data.train, &data.vocab, &tc, &lc)?;
    Ok(SeedModels {
        base,
        standard,
        curriculum,
        pretrain_losses,
        standard_log,
        curriculum_log,
    })
}

pub fn run_seed(data: &PreparedData, cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    let m = train_seed(data, cfg, seed)?;
    let run = format!("seed-{seed}");
    let label = |mode, log: Option<&TrainLog>| ReportLabel {
        run: run.clone(),
        mode: Some(mode),
        seed: Some(seed),
        train_presentations: Some(log.map_or(0, |l| l.presentations.len())),
    };
    let mut reports = BTreeMap::new();
    reports.insert(
        TrainMode::Baseline,
        evaluate(&Decoder::new(&m.base, None), &data.vocab, &data.eval, &cfg.eval, label(TrainMode::Baseline, None))?,
    );
    reports.insert(
        TrainMode::Standard,
        evaluate(
            &m.standard.decoder(),
            &data.vocab,
            &data.eval,
            &cfg.eval,
            label(TrainMode::Standard, Some(&m.standard_log)),
        )?,
    );
    reports.insert(
        TrainMode::Curriculum,
        evaluate(
            &m.curriculum.decoder(),
            &data.vocab,
            &data.eval,
            &cfg.eval,
            label(TrainMode::Curriculum, Some(&m.curriculum_log)),
        )?,
    );
    let mut logs = BTreeMap::new();
    logs.insert(TrainMode::Standard, m.standard_log);
    logs.insert(TrainMode::Curriculum, m.curriculum_log);
    Ok(RunOutcome {
        seed,
        pretrain_losses: m.pretrain_losses,
        reports,
        logs,
    })
}
