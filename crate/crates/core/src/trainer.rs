//! Pretraining and the three fine-tuning regimes.
//!
//! - `baseline`: the pretrained model, untouched.
//! - `standard`: LoRA adapters trained on every record, uniformly shuffled,
//!   for `3 × epochs_per_stage` epochs at `base_lr`.
//! - `curriculum`: stage `k` trains on the nested subset `D_k` for
//!   `epochs_per_stage` epochs at `base_lr · γ^(k−1)`, starting from the
//!   parameters stage `k − 1` ended with.
//!
//! Optimizer moments carry over between stages; only the learning rate
//! changes. Every epoch's order comes from its own derived stream
//! (`finetune-shuffle/{phase}/{epoch}`), so a run restored at an epoch
//! boundary continues exactly as the uninterrupted run would.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::checkpoint::{self, CheckpointKind, Header, Provenance};
use crate::dataset::{QaRecord, StagePartition};
use crate::error::{Error, Result};
use crate::lora::{attach, AdaptedModel, LoraConfig};
use crate::seed::component_rng;
use crate::severity::SeverityLabel;
use crate::arabic_text::normalize;
use crate::tiny_lm::{batch_loss, encode_text, Batch, EncodedPair, Model, ModelConfig, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Standard,
    Curriculum,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Baseline, TrainMode::Standard, TrainMode::Curriculum];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Standard => "standard",
            TrainMode::Curriculum => "curriculum",
        }
    }

    /// Column heading in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            TrainMode::Baseline => "Baseline",
            TrainMode::Standard => "Standard Fine-Tuning",
            TrainMode::Curriculum => "Curriculum Learning",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(TrainMode::Baseline),
            "standard" => Ok(TrainMode::Standard),
            "curriculum" => Ok(TrainMode::Curriculum),
            other => Err(Error::InvalidConfig(format!("unknown training mode `{other}`"))),
        }
    }
}

/// Text the base model is pretrained on, drawn from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainCorpus {
    /// questions as plain lines
    Questions,
    /// questions and answers as separate plain lines
    QuestionsAndAnswers,
    /// `question <sep> answer` with answers re-dealt across records: the
    /// base model learns the language and the answer format but not which
    /// answer belongs to which question
    ShuffledPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub stage_decay: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_corpus: PretrainCorpus,
    /// skip an empty curriculum stage with a warning instead of failing
    pub skip_empty_stages: bool,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            stage_decay: 0.5,
            epochs_per_stage: 3,
            batch_size: 16,
            seed: 0,
            mode: TrainMode::Curriculum,
            pretrain_epochs: 3,
            pretrain_lr: 1e-3,
            pretrain_corpus: PretrainCorpus::Questions,
            skip_empty_stages: false,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.stage_decay > 0.0 && self.stage_decay <= 1.0) {
            return bad(format!("stage_decay must lie in (0, 1], got {}", self.stage_decay));
        }
        if self.epochs_per_stage == 0 {
            return bad("epochs_per_stage must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.pretrain_epochs > 0 && !(self.pretrain_lr > 0.0) {
            return bad(format!("pretrain_lr must be positive, got {}", self.pretrain_lr));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            clip_norm: self.clip_norm,
            ..AdamConfig::with_lr(lr)
        }
    }
}

/// `base_lr · γ^(k−1)` for 1-based stage `k`.
pub fn stage_lr(base_lr: f64, decay: f64, k: usize) -> f64 {
    assert!((1..=3).contains(&k), "curriculum stages are numbered 1..=3, got {k}");
    base_lr * decay.powi(k as i32 - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    /// curriculum stage, absent for single-phase regimes
    pub stage: Option<usize>,
    /// 1-based within the phase
    pub epoch: usize,
    pub lr: f64,
    /// token-weighted mean training loss over the epoch
    pub mean_loss: f64,
    pub presentations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub stage: Option<usize>,
    pub epoch: usize,
    pub id: u64,
    pub severity: Option<SeverityLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLr {
    pub stage: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stage_lrs: Vec<StageLr>,
    pub presentations: Vec<Presentation>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// `stage → tier → count`; single-phase regimes use stage 0.
    pub fn presentation_counts(&self) -> BTreeMap<usize, BTreeMap<String, usize>> {
        let mut out: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
        for p in &self.presentations {
            let tier = p.severity.map_or("unlabeled", SeverityLabel::as_str).to_string();
            *out.entry(p.stage.unwrap_or(0)).or_default().entry(tier).or_default() += 1;
        }
        out
    }

    /// Presentations whose severity belongs to a later stage than the one
    /// they were shown in. Empty for a well-formed curriculum run.
    pub fn order_violations(&self) -> Vec<&Presentation> {
        self.presentations
            .iter()
            .filter(|p| match (p.stage, p.severity) {
                (Some(stage), Some(sev)) => sev.stage() > stage,
                _ => false,
            })
            .collect()
    }
}

/// A contiguous block of epochs at one learning rate over one record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub stage: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    /// record ids in corpus order
    pub ids: Vec<u64>,
}

pub fn standard_plan(records: &[QaRecord], cfg: &TrainConfig) -> Vec<Phase> {
    vec![Phase {
        stage: None,
        lr: cfg.base_lr,
        epochs: 3 * cfg.epochs_per_stage,
        ids: records.iter().map(|r| r.id).collect(),
    }]
}

pub fn curriculum_plan(records: &[QaRecord], partition: &StagePartition, cfg: &TrainConfig) -> Result<Vec<Phase>> {
    let mut out = Vec::new();
    for k in 1..=3 {
        let members = partition.stage(k);
        let ids: Vec<u64> = records.iter().map(|r| r.id).filter(|id| members.contains(id)).collect();
        if ids.is_empty() {
            if cfg.skip_empty_stages {
                log::warn!("curriculum stage {k} has no records; skipped");
                continue;
            }
            return Err(Error::EmptyStage(k));
        }
        out.push(Phase {
            stage: Some(k),
            lr: stage_lr(cfg.base_lr, cfg.stage_decay, k),
            epochs: cfg.epochs_per_stage,
            ids,
        });
    }
    Ok(out)
}

/// Encoded training examples keyed by record id. Records that cannot be
/// encoded are dropped with a warning.
pub struct EncodedSet {
    entries: HashMap<u64, (EncodedPair, Option<SeverityLabel>)>,
}

impl EncodedSet {
    pub fn new(records: &[QaRecord], vocab: &Vocab, context_len: usize) -> EncodedSet {
        let entries = records
            .iter()
            .filter_map(|r| crate::tiny_lm::encode_pair(r, vocab, context_len).map(|p| (r.id, (p, r.severity))))
            .collect();
        EncodedSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Shuffles `items` with `component`'s stream and yields them in batches.
fn epoch_batches<T: Copy>(items: &[T], seed: u64, component: &str, batch_size: usize) -> Vec<Vec<T>> {
    let mut order = items.to_vec();
    order.shuffle(&mut component_rng(seed, component));
    order.chunks(batch_size).map(<[T]>::to_vec).collect()
}

fn check_finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteGradient("loss".into()))
    }
}

/// One optimizer step on the full model.
pub fn model_step(model: &mut Model, batch: &Batch, adam: &mut AdamState, cfg: &AdamConfig) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let loss = batch_loss(&mut g, &bound, &model.config, None, batch)?;
    let value = check_finite(g.value(loss).item())?;
    g.backward(loss)?;
    let vars = bound.vars();
    let grads: Vec<&[f64]> = vars.iter().map(|&v| g.grad(v).expect("param leaf")).collect();
    let names = model.parameter_names();
    let mut params = model.parameters_mut();
    adam_step(&mut params, &grads, &names, adam, cfg)?;
    Ok(value)
}

/// One optimizer step on the adapters; the base model is bound as constants.
pub fn adapter_step(adapted: &mut AdaptedModel, batch: &Batch, adam: &mut AdamState, cfg: &AdamConfig) -> Result<f64> {
    let mut g = Graph::new();
    let bound = adapted.base.bind(&mut g, false);
    let ab = adapted.adapters.bind(&mut g);
    let loss = batch_loss(&mut g, &bound, &adapted.base.config, Some(&ab), batch)?;
    let value = check_finite(g.value(loss).item())?;
    g.backward(loss)?;
    let grads: Vec<&[f64]> = ab
        .slots
        .iter()
        .flatten()
        .flat_map(|&(a, b)| [g.grad(a).expect("param leaf"), g.grad(b).expect("param leaf")])
        .collect();
    let names: Vec<String> = adapted.trainable_parameters().into_iter().map(|(n, _)| n).collect();
    let mut params = adapted.trainable_parameters_mut();
    adam_step(&mut params, &grads, &names, adam, cfg)?;
    Ok(value)
}

/// Pretraining sequences for `corpus`. Every next-token position is scored.
/// The answer re-dealing of [`PretrainCorpus::ShuffledPairs`] draws from the
/// `pretrain-pairing` stream of `seed`.
pub fn pretrain_sequences(
    records: &[QaRecord],
    corpus: PretrainCorpus,
    vocab: &Vocab,
    context_len: usize,
    seed: u64,
) -> Vec<EncodedPair> {
    let text = |s: &str| encode_text(s, vocab, context_len);
    match corpus {
        PretrainCorpus::Questions => records.iter().filter_map(|r| text(&r.question)).collect(),
        PretrainCorpus::QuestionsAndAnswers => records
            .iter()
            .flat_map(|r| [text(&r.question), text(&r.answer)])
            .flatten()
            .collect(),
        PretrainCorpus::ShuffledPairs => {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut component_rng(seed, "pretrain-pairing"));
            records
                .iter()
                .zip(&order)
                .filter_map(|(q, &ai)| {
                    let question = vocab.encode(normalize(&q.question).as_str());
                    let answer = vocab.encode(normalize(&records[ai].answer).as_str());
                    let mut pair = EncodedPair::from_ids(&question, &answer, context_len)?;
                    pair.loss_mask.iter_mut().for_each(|m| *m = 1);
                    *pair.loss_mask.last_mut().expect("nonempty") = 0;
                    Some(pair)
                })
                .collect()
        }
    }
}

/// Trains a freshly initialized model on `sequences` under their loss
/// masks. Returns the model and the per-epoch mean losses.
pub fn pretrain(model_config: ModelConfig, sequences: &[EncodedPair], cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    let mut model = Model::init(model_config)?;
    if cfg.pretrain_epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let idx: Vec<usize> = (0..sequences.len()).collect();
    let adam_cfg = cfg.adam(cfg.pretrain_lr);
    let params: Vec<&Tensor> = model.named_parameters().into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::new(&params);
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let (mut total, mut weight) = (0.0, 0.0);
        for chunk in epoch_batches(&idx, cfg.seed, &format!("pretrain-shuffle/{epoch}"), cfg.batch_size) {
            let pairs: Vec<&EncodedPair> = chunk.iter().map(|&i| &sequences[i]).collect();
            let batch = Batch::from_pairs(&pairs);
            let loss = model_step(&mut model, &batch, &mut adam, &adam_cfg)?;
            total += loss * batch.active_positions();
            weight += batch.active_positions();
        }
        let mean = total / weight;
        log::info!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    Ok((model, losses))
}

/// Resumable fine-tuning state. `phase`/`epoch` point at the next epoch to run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneState {
    pub adapted: AdaptedModel,
    pub adam: AdamState,
    pub phase: usize,
    pub epoch: usize,
    pub log: TrainLog,
}

impl FinetuneState {
    pub fn new(base: Model, lora: LoraConfig) -> Result<FinetuneState> {
        let adapted = attach(base, lora)?;
        let params: Vec<&Tensor> = adapted.trainable_parameters().into_iter().map(|(_, t)| t).collect();
        let adam = AdamState::new(&params);
        Ok(FinetuneState {
            adapted,
            adam,
            phase: 0,
            epoch: 0,
            log: TrainLog::default(),
        })
    }

    pub fn is_done(&self, plan: &[Phase]) -> bool {
        self.phase >= plan.len()
    }
}

/// Where [`run_finetune`] should pause: before running epoch `epoch`
/// (0-based) of phase `phase`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopPoint {
    pub phase: usize,
    pub epoch: usize,
}

/// Runs `plan` from wherever `state` points until done or `stop`.
/// `on_phase_end` runs after the last epoch of every phase.
pub fn run_finetune(
    state: &mut FinetuneState,
    plan: &[Phase],
    data: &EncodedSet,
    cfg: &TrainConfig,
    stop: Option<StopPoint>,
    on_phase_end: &mut dyn FnMut(&Phase, &FinetuneState) -> Result<()>,
) -> Result<()> {
    while state.phase < plan.len() {
        let phase = &plan[state.phase];
        if state.epoch == 0 {
            if let Some(stage) = phase.stage {
                state.log.stage_lrs.push(StageLr { stage, lr: phase.lr });
            }
        }
        let ids: Vec<u64> = phase.ids.iter().copied().filter(|id| data.entries.contains_key(id)).collect();
        if ids.is_empty() {
            return Err(Error::EmptyStage(phase.stage.unwrap_or(0)));
        }
        let adam_cfg = cfg.adam(phase.lr);
        while state.epoch < phase.epochs {
            if stop == Some(StopPoint { phase: state.phase, epoch: state.epoch }) {
                return Ok(());
            }
            let component = format!("finetune-shuffle/{}/{}", state.phase, state.epoch);
            let (mut total, mut weight) = (0.0, 0.0);
            let mut presented = 0;
            for chunk in epoch_batches(&ids, cfg.seed, &component, cfg.batch_size) {
                let pairs: Vec<&EncodedPair> = chunk.iter().map(|id| &data.entries[id].0).collect();
                let batch = Batch::from_pairs(&pairs);
                let loss = adapter_step(&mut state.adapted, &batch, &mut state.adam, &adam_cfg)?;
                total += loss * batch.active_positions();
                weight += batch.active_positions();
                for id in &chunk {
                    state.log.presentations.push(Presentation {
                        stage: phase.stage,
                        epoch: state.epoch + 1,
                        id: *id,
                        severity: data.entries[id].1,
                    });
                }
                presented += chunk.len();
            }
            let mean = total / weight;
            log::info!(
                "phase {} epoch {} (lr {:e}): loss {mean:.4}",
                state.phase + 1,
                state.epoch + 1,
                phase.lr
            );
            state.log.epochs.push(EpochRecord {
                phase: state.phase,
                stage: phase.stage,
                epoch: state.epoch + 1,
                lr: phase.lr,
                mean_loss: mean,
                presentations: presented,
            });
            state.epoch += 1;
        }
        on_phase_end(phase, state)?;
        state.phase += 1;
        state.epoch = 0;
    }
    Ok(())
}

pub fn plan_for(mode: TrainMode, records: &[QaRecord], partition: Option<&StagePartition>, cfg: &TrainConfig) -> Result<Vec<Phase>> {
    match mode {
        TrainMode::Baseline => Ok(Vec::new()),
        TrainMode::Standard => Ok(standard_plan(records, cfg)),
        TrainMode::Curriculum => {
            let owned;
            let partition = match partition {
                Some(p) => p,
                None => {
                    owned = crate::dataset::stage_split(records)?;
                    &owned
                }
            };
            curriculum_plan(records, partition, cfg)
        }
    }
}

/// LoRA fine-tuning on all records for `3 × epochs_per_stage` epochs.
/// Severity labels are ignored.
pub fn finetune_standard(
    base: &Model,
    records: &[QaRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
    lora: &LoraConfig,
) -> Result<(AdaptedModel, TrainLog)> {
    finetune_with_plan(base, &standard_plan(records, cfg), records, vocab, cfg, lora)
}

/// The three-stage severity curriculum over `partition`.
pub fn finetune_curriculum(
    base: &Model,
    partition: &StagePartition,
    records: &[QaRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
    lora: &LoraConfig,
) -> Result<(AdaptedModel, TrainLog)> {
    if !partition.is_nested() {
        return Err(Error::InvalidConfig("stage partition is not nested".into()));
    }
    let plan = curriculum_plan(records, partition, cfg)?;
    finetune_with_plan(base, &plan, records, vocab, cfg, lora)
}

fn finetune_with_plan(
    base: &Model,
    plan: &[Phase],
    records: &[QaRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
    lora: &LoraConfig,
) -> Result<(AdaptedModel, TrainLog)> {
    cfg.validate()?;
    let data = EncodedSet::new(records, vocab, base.config.context_len);
    let mut state = FinetuneState::new(base.clone(), lora.clone())?;
    run_finetune(&mut state, plan, &data, cfg, None, &mut |_, _| Ok(()))?;
    Ok((state.adapted, state.log))
}

#[derive(Serialize, Deserialize)]
struct TrainStateMeta {
    phase: usize,
    epoch: usize,
    adam_step: u64,
    log: TrainLog,
    n_base: usize,
    n_adapter: usize,
}

/// Writes everything needed to continue `state`: base and adapter tensors,
/// optimizer moments, progress and log. Shuffle streams are derived from
/// `(seed, phase, epoch)`, so no generator state needs storing.
pub fn save_train_state(path: &Path, state: &FinetuneState, vocab: &Vocab, provenance: Provenance) -> Result<String> {
    let mut header = Header::new(CheckpointKind::TrainState, &state.adapted.base.config, vocab, provenance);
    header.lora = Some(state.adapted.config.clone());
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let base = state.adapted.base.named_parameters();
    let adapters = state.adapted.trainable_parameters();
    for (n, t) in base.iter().chain(adapters.iter()) {
        tensors.push((n.clone(), (*t).clone()));
    }
    for (i, (m, v)) in state.adam.m.iter().zip(&state.adam.v).enumerate() {
        tensors.push((format!("adam.m.{i}"), Tensor::new(vec![m.len()], m.clone())?));
        tensors.push((format!("adam.v.{i}"), Tensor::new(vec![v.len()], v.clone())?));
    }
    let meta = TrainStateMeta {
        phase: state.phase,
        epoch: state.epoch,
        adam_step: state.adam.step,
        log: state.log.clone(),
        n_base: base.len(),
        n_adapter: adapters.len(),
    };
    header.extra = serde_json::to_value(&meta).map_err(|e| Error::CorruptFile(e.to_string()))?;
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    checkpoint::write_checkpoint(path, header, &refs)
}

pub fn load_train_state(path: &Path) -> Result<(FinetuneState, Vocab, Header)> {
    let (header, mut tensors) = checkpoint::read_checkpoint(path)?;
    if header.kind != CheckpointKind::TrainState {
        return Err(Error::CorruptFile("not a training-state checkpoint".into()));
    }
    let meta: TrainStateMeta =
        serde_json::from_value(header.extra.clone()).map_err(|e| Error::CorruptFile(format!("train state: {e}")))?;
    let lora = header
        .lora
        .clone()
        .ok_or_else(|| Error::CorruptFile("train state has no lora config".into()))?;
    if tensors.len() != meta.n_base + meta.n_adapter * 3 {
        return Err(Error::CorruptFile("train state tensor count does not match its table".into()));
    }
    let moments = tensors.split_off(meta.n_base + meta.n_adapter);
    let adapter_tensors = tensors.split_off(meta.n_base);
    let mut base = Model::init(header.model_config.clone())?;
    let names = base.parameter_names();
    checkpoint::assign_tensors(&header.tensors[..meta.n_base], tensors, &names, base.parameters_mut())?;
    let mut adapted = attach(base, lora)?;
    let names: Vec<String> = adapted.trainable_parameters().into_iter().map(|(n, _)| n).collect();
    checkpoint::assign_tensors(
        &header.tensors[meta.n_base..meta.n_base + meta.n_adapter],
        adapter_tensors,
        &names,
        adapted.trainable_parameters_mut(),
    )?;
    let mut m = Vec::with_capacity(meta.n_adapter);
    let mut v = Vec::with_capacity(meta.n_adapter);
    for pair in moments.chunks_exact(2) {
        m.push(pair[0].data().to_vec());
        v.push(pair[1].data().to_vec());
    }
    let state = FinetuneState {
        adapted,
        adam: AdamState {
            step: meta.adam_step,
            m,
            v,
        },
        phase: meta.phase,
        epoch: meta.epoch,
        log: meta.log,
    };
    Ok((state, header.vocab(), header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{stage_split, synth_generate};
    use crate::tiny_lm::{build_vocab, SEP};

    fn small_model(vocab: &Vocab, seed: u64) -> Model {
        let mut c = ModelConfig::new(vocab.size());
        c.embed_dim = 16;
        c.seed = seed;
        Model::init(c).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs_per_stage: 1,
            batch_size: 4,
            base_lr: 1e-2,
            pretrain_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_lr_schedule() {
        assert_eq!(stage_lr(3e-4, 0.5, 1), 3e-4);
        assert_eq!(stage_lr(3e-4, 0.5, 3), 7.5e-5);
        assert_eq!(stage_lr(3e-4, 1.0, 2), 3e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { stage_decay: 1.5, ..TrainConfig::default() },
            TrainConfig { stage_decay: 0.0, ..TrainConfig::default() },
            TrainConfig { epochs_per_stage: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
        assert_eq!("Curriculum".parse::<TrainMode>().unwrap(), TrainMode::Curriculum);
        assert!("fast".parse::<TrainMode>().is_err());
    }

    #[test]
    fn curriculum_respects_stage_membership() {
        let records = synth_generate(4, 1);
        let vocab = build_vocab(&records).unwrap();
        let cfg = TrainConfig { epochs_per_stage: 2, ..quick_cfg() };
        let part = stage_split(&records).unwrap();
        let (_, log) =
            finetune_curriculum(&small_model(&vocab, 1), &part, &records, &vocab, &cfg, &LoraConfig::default()).unwrap();
        assert!(log.order_violations().is_empty());
        let counts = log.presentation_counts();
        assert_eq!(counts[&1].get("moderate"), None);
        assert_eq!(counts[&2].get("critical"), None);
        assert_eq!(counts[&3]["critical"], 2 * 4);
        let total: usize = log.epochs.iter().map(|e| e.presentations).sum();
        assert_eq!(total, 2 * (4 + 8 + 12));
        let lrs: Vec<f64> = log.stage_lrs.iter().map(|s| s.lr).collect();
        assert_eq!(lrs, vec![1e-2, 5e-3, 2.5e-3]);
    }

    #[test]
    fn empty_stage_fails_or_is_skipped() {
        let records: Vec<QaRecord> = synth_generate(3, 2)
            .into_iter()
            .filter(|r| r.severity != Some(SeverityLabel::Mild))
            .collect();
        let part = stage_split(&records).unwrap();
        let cfg = quick_cfg();
        assert!(matches!(curriculum_plan(&records, &part, &cfg), Err(Error::EmptyStage(1))));
        let cfg = TrainConfig { skip_empty_stages: true, ..cfg };
        let plan = curriculum_plan(&records, &part, &cfg).unwrap();
        assert_eq!(plan.iter().map(|p| p.stage).collect::<Vec<_>>(), vec![Some(2), Some(3)]);
    }

    #[test]
    fn all_mild_curriculum_is_decayed_standard() {
        let records: Vec<QaRecord> = synth_generate(5, 3)
            .into_iter()
            .filter(|r| r.severity == Some(SeverityLabel::Mild))
            .collect();
        let part = stage_split(&records).unwrap();
        let cfg = quick_cfg();
        let plan = curriculum_plan(&records, &part, &cfg).unwrap();
        assert!(plan.iter().all(|p| p.ids == plan[0].ids));
    }

    #[test]
    fn standard_ignores_labels() {
        let records = synth_generate(3, 4);
        let vocab = build_vocab(&records).unwrap();
        let base = small_model(&vocab, 4);
        let cfg = quick_cfg();
        let relabeled: Vec<QaRecord> = records
            .iter()
            .map(|r| QaRecord { severity: Some(SeverityLabel::Critical), ..r.clone() })
            .collect();
        let (a, _) = finetune_standard(&base, &records, &vocab, &cfg, &LoraConfig::default()).unwrap();
        let (b, _) = finetune_standard(&base, &relabeled, &vocab, &cfg, &LoraConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.base, base);
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let records = synth_generate(6, 5);
        let vocab = build_vocab(&records).unwrap();
        let mut mc = ModelConfig::new(vocab.size());
        mc.embed_dim = 16;
        let seqs = pretrain_sequences(&records, PretrainCorpus::Questions, &vocab, mc.context_len, 0);
        let cfg = TrainConfig { pretrain_epochs: 4, batch_size: 4, ..TrainConfig::default() };
        let (m1, losses) = pretrain(mc.clone(), &seqs, &cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
        let (m2, _) = pretrain(mc.clone(), &seqs, &cfg).unwrap();
        assert_eq!(m1, m2);
        let cfg0 = TrainConfig { pretrain_epochs: 0, ..cfg };
        assert_eq!(pretrain(mc.clone(), &seqs, &cfg0).unwrap().0, Model::init(mc).unwrap());
    }

    #[test]
    fn shuffled_pairs_keep_questions_and_redeal_answers() {
        let records = synth_generate(20, 8);
        let vocab = build_vocab(&records).unwrap();
        let seqs = pretrain_sequences(&records, PretrainCorpus::ShuffledPairs, &vocab, 128, 3);
        assert_eq!(seqs.len(), records.len());
        let split = |p: &EncodedPair| {
            let sep = p.ids.iter().position(|&t| t == SEP).unwrap();
            (p.ids[1..sep].to_vec(), p.ids[sep + 1..p.ids.len() - 1].to_vec())
        };
        let mut answers = Vec::new();
        let mut moved = 0;
        for (p, r) in seqs.iter().zip(&records) {
            let (q, a) = split(p);
            assert_eq!(q, vocab.encode(normalize(&r.question).as_str()));
            moved += usize::from(a != vocab.encode(normalize(&r.answer).as_str()));
            answers.push(a);
            assert_eq!(p.loss_mask.iter().filter(|&&m| m == 1).count(), p.ids.len() - 1);
        }
        let mut expect: Vec<Vec<u32>> = records.iter().map(|r| vocab.encode(normalize(&r.answer).as_str())).collect();
        answers.sort();
        expect.sort();
        assert_eq!(answers, expect);
        assert!(moved > records.len() / 2);
        assert_eq!(seqs, pretrain_sequences(&records, PretrainCorpus::ShuffledPairs, &vocab, 128, 3));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let records = synth_generate(3, 6);
        let vocab = build_vocab(&records).unwrap();
        let base = small_model(&vocab, 6);
        let cfg = TrainConfig { epochs_per_stage: 2, ..quick_cfg() };
        let part = stage_split(&records).unwrap();
        let plan = curriculum_plan(&records, &part, &cfg).unwrap();
        let data = EncodedSet::new(&records, &vocab, base.config.context_len);

        let mut full = FinetuneState::new(base.clone(), LoraConfig::default()).unwrap();
        run_finetune(&mut full, &plan, &data, &cfg, None, &mut |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut first = FinetuneState::new(base, LoraConfig::default()).unwrap();
        let stop = StopPoint { phase: 1, epoch: 1 };
        run_finetune(&mut first, &plan, &data, &cfg, Some(stop), &mut |_, _| Ok(())).unwrap();
        save_train_state(&path, &first, &vocab, Provenance::default()).unwrap();
        let (mut resumed, v2, _) = load_train_state(&path).unwrap();
        assert_eq!(resumed, first);
        assert_eq!(v2, vocab);
        run_finetune(&mut resumed, &plan, &data, &cfg, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn stages_chain_parameters() {
        let records = synth_generate(2, 7);
        let vocab = build_vocab(&records).unwrap();
        let cfg = quick_cfg();
        let part = stage_split(&records).unwrap();
        let plan = curriculum_plan(&records, &part, &cfg).unwrap();
        let data = EncodedSet::new(&records, &vocab, 128);
        let mut state = FinetuneState::new(small_model(&vocab, 7), LoraConfig::default()).unwrap();
        let mut ends = Vec::new();
        run_finetune(&mut state, &plan, &data, &cfg, None, &mut |_, s| {
            ends.push(s.adapted.adapters.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(ends.len(), 3);
        assert_eq!(ends[2], state.adapted.adapters);
        assert_ne!(ends[0], ends[1]);
    }
}
