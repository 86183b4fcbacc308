//! Command-line front end. Settings resolve as defaults < `--config` JSON
//! file < `SEVCL_*` environment variables < flags, before any subcommand
//! runs, and the resolved [`CliConfig`] is echoed into every run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arabic_text::normalize;
use crate::checkpoint::{self, load_any, save_adapter, save_model, Provenance};
use crate::dataset::{
    dataset_hash, load_jsonl, stage_split, stats, synth_generate, train_eval_split, write_jsonl, QaRecord,
};
use crate::error::{Error, Result};
use crate::eval::{compare_report, evaluate, EvalConfig, EvalReport, ReportLabel};
use crate::experiment::{prepare, run_seed, ExperimentConfig};
use crate::lora::LoraConfig;
use crate::severity::{annotate_dataset, Lexicon};
use crate::tiny_lm::{build_vocab, DecodeMode, Decoder, ModelConfig};
use crate::trainer::{
    load_train_state, plan_for, pretrain, pretrain_sequences, run_finetune, save_train_state, EncodedSet,
    FinetuneState, PretrainCorpus, TrainConfig, TrainLog, TrainMode,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// Model shape; the vocabulary size comes from the data and the seed from
/// the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(0);
        ModelSection {
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            context_len: m.context_len,
            mlp_ratio: m.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for LoraSection {
    fn default() -> Self {
        let l = LoraConfig::default();
        LoraSection {
            rank: l.rank,
            alpha: l.alpha,
            targets: l.targets.iter().map(|t| t.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DecodeKind {
    Greedy,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_new_tokens: usize,
    pub decode: DecodeKind,
    /// top-k only
    pub top_k: usize,
    /// top-k only
    pub temperature: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_new_tokens: EvalConfig::default().max_new_tokens,
            decode: DecodeKind::Greedy,
            top_k: 5,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub lora: LoraSection,
    pub eval: EvalSection,
}

impl CliConfig {
    pub fn from_json_file(path: &Path) -> Result<CliConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.data.train_fraction
            )));
        }
        self.model_config(1).validate()?;
        self.train.validate()?;
        self.lora_config()?.validate()?;
        if self.eval.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        if self.eval.decode == DecodeKind::TopK && (self.eval.top_k == 0 || !(self.eval.temperature > 0.0)) {
            return Err(Error::InvalidConfig("top-k decoding needs top_k ≥ 1 and temperature > 0".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            context_len: self.model.context_len,
            mlp_ratio: self.model.mlp_ratio,
            seed: self.train.seed,
        }
    }

    pub fn lora_config(&self) -> Result<LoraConfig> {
        let targets = LoraConfig::parse_targets(&self.lora.targets)?;
        if targets.is_empty() {
            return Err(Error::InvalidConfig("lora needs at least one target".into()));
        }
        Ok(LoraConfig {
            rank: self.lora.rank,
            alpha: self.lora.alpha,
            targets,
            seed: self.train.seed,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        let decode = match self.eval.decode {
            DecodeKind::Greedy => DecodeMode::Greedy,
            DecodeKind::TopK => DecodeMode::TopK {
                k: self.eval.top_k,
                temperature: self.eval.temperature,
                seed: self.train.seed,
            },
        };
        EvalConfig {
            max_new_tokens: self.eval.max_new_tokens,
            decode,
        }
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            train_fraction: self.data.train_fraction,
            split_seed: self.data.split_seed,
            model: self.model_config(0),
            train: self.train.clone(),
            lora: self.lora_config()?,
            eval: self.eval_config(),
        })
    }
}

/// Setting overrides shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true, env = "SEVCL_TRAIN_FRACTION")]
    pub train_fraction: Option<f64>,
    #[arg(long, global = true, env = "SEVCL_SPLIT_SEED")]
    pub split_seed: Option<u64>,
    #[arg(long, global = true, env = "SEVCL_EMBED_DIM")]
    pub embed_dim: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_N_LAYERS")]
    pub n_layers: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_N_HEADS")]
    pub n_heads: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_CONTEXT_LEN")]
    pub context_len: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_MLP_RATIO")]
    pub mlp_ratio: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_BASE_LR")]
    pub base_lr: Option<f64>,
    #[arg(long, global = true, env = "SEVCL_STAGE_DECAY")]
    pub stage_decay: Option<f64>,
    #[arg(long, global = true, env = "SEVCL_EPOCHS_PER_STAGE")]
    pub epochs_per_stage: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_PRETRAIN_EPOCHS")]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_PRETRAIN_LR")]
    pub pretrain_lr: Option<f64>,
    /// questions | questions_and_answers | shuffled_pairs
    #[arg(long, global = true, env = "SEVCL_PRETRAIN_CORPUS", value_parser = parse_corpus)]
    pub pretrain_corpus: Option<PretrainCorpus>,
    #[arg(long, global = true, env = "SEVCL_SKIP_EMPTY_STAGES")]
    pub skip_empty_stages: Option<bool>,
    /// global gradient-norm clip; `0` disables clipping
    #[arg(long, global = true, env = "SEVCL_CLIP_NORM")]
    pub clip_norm: Option<f64>,
    #[arg(long, global = true, env = "SEVCL_LORA_RANK")]
    pub lora_rank: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_LORA_ALPHA")]
    pub lora_alpha: Option<f64>,
    /// comma-separated subset of q,k,v,o
    #[arg(long, global = true, env = "SEVCL_LORA_TARGETS", value_delimiter = ',')]
    pub lora_targets: Option<Vec<String>>,
    #[arg(long, global = true, env = "SEVCL_MAX_NEW_TOKENS")]
    pub max_new_tokens: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_DECODE", value_enum)]
    pub decode: Option<DecodeKind>,
    #[arg(long, global = true, env = "SEVCL_TOP_K")]
    pub top_k: Option<usize>,
    #[arg(long, global = true, env = "SEVCL_TEMPERATURE")]
    pub temperature: Option<f64>,
}

fn parse_corpus(s: &str) -> std::result::Result<PretrainCorpus, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown pretrain corpus `{s}` (questions | questions_and_answers | shuffled_pairs)"))
}

impl Overrides {
    pub fn apply(&self, c: &mut CliConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut c.data.train_fraction, &self.train_fraction);
        set(&mut c.data.split_seed, &self.split_seed);
        set(&mut c.model.embed_dim, &self.embed_dim);
        set(&mut c.model.n_layers, &self.n_layers);
        set(&mut c.model.n_heads, &self.n_heads);
        set(&mut c.model.context_len, &self.context_len);
        set(&mut c.model.mlp_ratio, &self.mlp_ratio);
        set(&mut c.train.base_lr, &self.base_lr);
        set(&mut c.train.stage_decay, &self.stage_decay);
        set(&mut c.train.epochs_per_stage, &self.epochs_per_stage);
        set(&mut c.train.batch_size, &self.batch_size);
        set(&mut c.train.pretrain_epochs, &self.pretrain_epochs);
        set(&mut c.train.pretrain_lr, &self.pretrain_lr);
        set(&mut c.train.pretrain_corpus, &self.pretrain_corpus);
        set(&mut c.train.skip_empty_stages, &self.skip_empty_stages);
        if let Some(clip) = self.clip_norm {
            c.train.clip_norm = (clip > 0.0).then_some(clip);
        }
        set(&mut c.lora.rank, &self.lora_rank);
        set(&mut c.lora.alpha, &self.lora_alpha);
        set(&mut c.lora.targets, &self.lora_targets);
        set(&mut c.eval.max_new_tokens, &self.max_new_tokens);
        set(&mut c.eval.decode, &self.decode);
        set(&mut c.eval.top_k, &self.top_k);
        set(&mut c.eval.temperature, &self.temperature);
    }
}

#[derive(Debug, Parser)]
#[command(name = "sevcl", version, about = "Severity-staged curriculum fine-tuning for Arabic medical QA")]
pub struct Cli {
    /// JSON settings file (sections: data, model, train, lora, eval)
    #[arg(long, global = true, env = "SEVCL_CONFIG")]
    pub config: Option<PathBuf>,
    /// print the resolved settings as JSON and exit
    #[arg(long, global = true)]
    pub print_config: bool,
    /// log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize text lines (`-` for stdin/stdout)
    Normalize {
        #[arg(long = "in", default_value = "-")]
        input: String,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Label every record with its severity tier and print the tier counts
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// lexicon JSON (default: the bundled lexicon)
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// keep labels already present in the input
        #[arg(long)]
        keep_existing: bool,
    },
    /// Split into train/eval and write the nested stage manifests of the train part
    Stage {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// treat the whole input as training data
        #[arg(long)]
        no_split: bool,
    },
    /// Generate a templated synthetic corpus
    Synth {
        #[arg(long)]
        n_per_tier: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain (unless --base is given) and run one training regime
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        data: PathBuf,
        /// held-out records: widen the vocabulary and write report.json
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, env = "SEVCL_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// existing base model checkpoint to fine-tune instead of pretraining
        #[arg(long)]
        base: Option<PathBuf>,
        /// continue from a training-state checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a model or adapter checkpoint on a JSONL file
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// row label in comparisons (default: seed-<seed>)
        #[arg(long)]
        run: Option<String>,
    },
    /// Render the three-column comparison from evaluation reports
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// comparison as JSON, including plot rows
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Synthetic corpus, shared split, all three regimes per seed, comparison
    Experiment {
        #[arg(long, default_value_t = 600)]
        n_per_tier: usize,
        #[arg(long, default_value_t = 0)]
        corpus_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Settings after file, environment and flags, including the per-run
/// `--mode`/`--seed` of `train`.
pub fn resolve_config(cli: &Cli) -> Result<CliConfig> {
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::from_json_file(p)?,
        None => CliConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    if let Some(Command::Train { mode, seed, .. }) = &cli.command {
        if let Some(m) = mode {
            cfg.train.mode = *m;
        }
        if let Some(s) = seed {
            cfg.train.seed = *s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.print_config {
        println!("{}", to_json(&cfg)?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::InvalidConfig("no subcommand given (see --help)".into()));
    };
    match command {
        Command::Normalize { input, out } => cmd_normalize(&input, &out),
        Command::Annotate {
            input,
            out,
            lexicon,
            keep_existing,
        } => cmd_annotate(&input, &out, lexicon.as_deref(), keep_existing),
        Command::Stage { input, out_dir, no_split } => cmd_stage(&cfg, &input, &out_dir, no_split),
        Command::Synth { n_per_tier, seed, out } => cmd_synth(n_per_tier, seed, &out),
        Command::Train {
            data,
            eval_data,
            out_dir,
            base,
            resume,
            ..
        } => cmd_train(&cfg, &data, eval_data.as_deref(), &out_dir, base.as_deref(), resume.as_deref()),
        Command::Eval { model, data, out, run } => cmd_eval(&cfg, &model, &data, &out, run),
        Command::Report { runs, out, csv, json } => cmd_report(&runs, out.as_deref(), csv.as_deref(), json.as_deref()),
        Command::Experiment {
            n_per_tier,
            corpus_seed,
            seeds,
            out_dir,
        } => cmd_experiment(&cfg, n_per_tier, corpus_seed, &seeds, &out_dir),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(to_json(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_normalize(input: &str, out: &str) -> Result<()> {
    let reader: Box<dyn BufRead> = if input == "-" {
        Box::new(BufReader::new(io::stdin()))
    } else {
        let f = fs::File::open(input).map_err(|e| Error::io(input, e))?;
        Box::new(BufReader::new(f))
    };
    let (writer, out_name): (Box<dyn Write>, &str) = if out == "-" {
        (Box::new(BufWriter::new(io::stdout())), "<stdout>")
    } else {
        let f = fs::File::create(out).map_err(|e| Error::io(out, e))?;
        (Box::new(BufWriter::new(f)), out)
    };
    let mut writer = writer;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(input, i + 1, e.to_string()))?;
        writeln!(writer, "{}", normalize(&line).as_str()).map_err(|e| Error::io(out_name, e))?;
    }
    writer.flush().map_err(|e| Error::io(out_name, e))
}

fn cmd_annotate(input: &Path, out: &Path, lexicon: Option<&Path>, keep_existing: bool) -> Result<()> {
    let lexicon = match lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::default_lexicon(),
    };
    let records = load_jsonl(input)?;
    let (annotated, stats) = annotate_dataset(&records, &lexicon, keep_existing);
    write_jsonl(&annotated, out)?;
    println!("{}", serde_json::to_string(&stats).expect("plain struct"));
    Ok(())
}

#[derive(Serialize)]
struct StageManifest {
    input: String,
    input_hash: String,
    train_fraction: Option<f64>,
    split_seed: Option<u64>,
    train_records: usize,
    eval_records: Option<usize>,
    stage_sizes: [usize; 3],
    train_stats: crate::dataset::SeverityStats,
    timestamp_unix: u64,
}

fn write_ids(path: &Path, ids: &std::collections::BTreeSet<u64>) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(&id.to_string());
        text.push('\n');
    }
    write_text(path, &text)
}

fn cmd_stage(cfg: &CliConfig, input: &Path, out_dir: &Path, no_split: bool) -> Result<()> {
    let records = load_jsonl(input)?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    create_dir(out_dir)?;
    let (train, eval) = if no_split {
        (records.clone(), None)
    } else {
        let (t, e) = train_eval_split(&records, cfg.data.train_fraction, cfg.data.split_seed)?;
        (t, Some(e))
    };
    let partition = stage_split(&train)?;
    write_jsonl(&train, &out_dir.join("train.jsonl"))?;
    if let Some(e) = &eval {
        write_jsonl(e, &out_dir.join("eval.jsonl"))?;
    }
    for k in 1..=3 {
        let ids = partition.stage(k);
        write_ids(&out_dir.join(format!("d{k}.ids")), ids)?;
        let members: Vec<QaRecord> = train.iter().filter(|r| ids.contains(&r.id)).cloned().collect();
        write_jsonl(&members, &out_dir.join(format!("d{k}.jsonl")))?;
    }
    let manifest = StageManifest {
        input: input.display().to_string(),
        input_hash: dataset_hash(&records),
        train_fraction: (!no_split).then_some(cfg.data.train_fraction),
        split_seed: (!no_split).then_some(cfg.data.split_seed),
        train_records: train.len(),
        eval_records: eval.as_ref().map(Vec::len),
        stage_sizes: [partition.d1.len(), partition.d2.len(), partition.d3.len()],
        train_stats: stats(&train),
        timestamp_unix: timestamp(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!(
        "d1={} d2={} d3={} eval={}",
        partition.d1.len(),
        partition.d2.len(),
        partition.d3.len(),
        eval.map_or(0, |e| e.len())
    );
    Ok(())
}

fn cmd_synth(n_per_tier: usize, seed: u64, out: &Path) -> Result<()> {
    if n_per_tier == 0 {
        return Err(Error::InvalidConfig("n_per_tier must be at least 1".into()));
    }
    let records = synth_generate(n_per_tier, seed);
    write_jsonl(&records, out)?;
    println!("{}", stats(&records));
    Ok(())
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Serialize)]
struct FileRef {
    path: String,
    payload_sha256: String,
}

#[derive(Serialize)]
struct DataRef {
    path: String,
    records: usize,
    sha256: String,
}

#[derive(Serialize)]
struct TrainManifest {
    command: &'static str,
    version: &'static str,
    config: CliConfig,
    mode: TrainMode,
    seed: u64,
    data: DataRef,
    eval_data: Option<DataRef>,
    vocab_size: usize,
    base: FileRef,
    pretrained: bool,
    pretrain_losses: Vec<f64>,
    model: FileRef,
    stage_checkpoints: Vec<FileRef>,
    log: TrainLog,
    presentation_counts: BTreeMap<usize, BTreeMap<String, usize>>,
    report: Option<String>,
    timestamp_unix: u64,
}

fn data_ref(path: &Path, records: &[QaRecord]) -> DataRef {
    DataRef {
        path: path.display().to_string(),
        records: records.len(),
        sha256: dataset_hash(records),
    }
}

fn cmd_train(
    cfg: &CliConfig,
    data_path: &Path,
    eval_path: Option<&Path>,
    out_dir: &Path,
    base_path: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let tc = &cfg.train;
    let train = load_jsonl(data_path)?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let eval = eval_path.map(load_jsonl).transpose()?;
    create_dir(out_dir)?;

    let (base, vocab, pretrain_losses, pretrained) = match base_path {
        Some(p) => {
            let (m, v, _) = checkpoint::load_model(p)?;
            (m, v, Vec::new(), false)
        }
        None => {
            let mut all = train.clone();
            all.extend(eval.iter().flatten().cloned());
            let vocab = build_vocab(&all)?;
            let mc = cfg.model_config(vocab.size());
            let seqs = pretrain_sequences(&train, tc.pretrain_corpus, &vocab, mc.context_len, tc.seed);
            let (m, losses) = pretrain(mc, &seqs, tc)?;
            (m, vocab, losses, true)
        }
    };
    let prov = |mode: TrainMode, stage: Option<usize>, presentations: Option<usize>| Provenance {
        mode: Some(mode.as_str().to_string()),
        stage,
        seed: tc.seed,
        presentations,
    };
    let base_file = out_dir.join("base.ckpt");
    let base_sha = save_model(&base_file, &base, &vocab, prov(TrainMode::Baseline, None, Some(0)))?;
    let model_file = out_dir.join("model.ckpt");
    let mut stage_checkpoints = Vec::new();

    let (model_sha, log) = if tc.mode == TrainMode::Baseline {
        (base_sha.clone(), TrainLog::default())
    } else {
        let partition = match tc.mode {
            TrainMode::Curriculum => Some(stage_split(&train)?),
            _ => None,
        };
        let plan = plan_for(tc.mode, &train, partition.as_ref(), tc)?;
        let data = EncodedSet::new(&train, &vocab, base.config.context_len);
        let mut state = match resume {
            Some(p) => {
                let (state, v, _) = load_train_state(p)?;
                if v != vocab || state.adapted.base != base {
                    return Err(Error::InvalidConfig(format!(
                        "{} was not written by a run with this base model and data",
                        p.display()
                    )));
                }
                state
            }
            None => FinetuneState::new(base.clone(), cfg.lora_config()?)?,
        };
        let mode = tc.mode;
        let mut on_phase_end = |phase: &crate::trainer::Phase, st: &FinetuneState| -> Result<()> {
            let name = match phase.stage {
                Some(k) => format!("stage-{k}.state"),
                None => "final.state".to_string(),
            };
            let path = out_dir.join(name);
            // the saved state points at the phase that follows
            let mut next = st.clone();
            next.phase += 1;
            next.epoch = 0;
            let sha = save_train_state(&path, &next, &vocab, prov(mode, phase.stage, Some(st.log.presentations.len())))?;
            stage_checkpoints.push(FileRef {
                path: path.display().to_string(),
                payload_sha256: sha,
            });
            Ok(())
        };
        run_finetune(&mut state, &plan, &data, tc, None, &mut on_phase_end)?;
        let presentations = state.log.presentations.len();
        let sha = save_adapter(&model_file, &state.adapted, &vocab, &base_file, prov(mode, None, Some(presentations)))?;
        (sha, state.log)
    };
    if tc.mode == TrainMode::Baseline {
        save_model(&model_file, &base, &vocab, prov(TrainMode::Baseline, None, Some(0)))?;
    }
    write_json(&out_dir.join("train_log.json"), &log)?;

    let report_path = match &eval {
        Some(records) => {
            let path = out_dir.join("report.json");
            let report = eval_checkpoint(cfg, &model_file, records, None)?;
            write_json(&path, &report)?;
            println!(
                "{} seed {}: token_f1 {:.2}% lcs_f1 {:.2}% perplexity {:.3}",
                tc.mode.title(),
                tc.seed,
                100.0 * report.token_f1,
                100.0 * report.lcs_f1,
                report.perplexity
            );
            Some(path.display().to_string())
        }
        None => None,
    };

    let manifest = TrainManifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        mode: tc.mode,
        seed: tc.seed,
        data: data_ref(data_path, &train),
        eval_data: eval_path.zip(eval.as_deref()).map(|(p, r)| data_ref(p, r)),
        vocab_size: vocab.size(),
        base: FileRef {
            path: base_file.display().to_string(),
            payload_sha256: base_sha,
        },
        pretrained,
        pretrain_losses,
        model: FileRef {
            path: model_file.display().to_string(),
            payload_sha256: model_sha,
        },
        stage_checkpoints,
        presentation_counts: log.presentation_counts(),
        log,
        report: report_path,
        timestamp_unix: timestamp(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

fn eval_checkpoint(cfg: &CliConfig, model_path: &Path, records: &[QaRecord], run: Option<String>) -> Result<EvalReport> {
    let (loaded, vocab, header) = load_any(model_path)?;
    let prov = &header.provenance;
    let mode = prov.mode.as_deref().map(str::parse::<TrainMode>).transpose()?;
    let label = ReportLabel {
        run: run.unwrap_or_else(|| format!("seed-{}", prov.seed)),
        mode,
        seed: Some(prov.seed),
        train_presentations: prov.presentations,
    };
    let mut eval_cfg = cfg.eval_config();
    if let DecodeMode::TopK { seed, .. } = &mut eval_cfg.decode {
        *seed = prov.seed;
    }
    let decoder = Decoder::new(loaded.base(), loaded.adapters());
    evaluate(&decoder, &vocab, records, &eval_cfg, label)
}

fn cmd_eval(cfg: &CliConfig, model: &Path, data: &Path, out: &Path, run: Option<String>) -> Result<()> {
    let records = load_jsonl(data)?;
    let report = eval_checkpoint(cfg, model, &records, run)?;
    write_json(out, &report)?;
    println!(
        "token_f1 {:.2}% lcs_f1 {:.2}% perplexity {:.3} ({} records)",
        100.0 * report.token_f1,
        100.0 * report.lcs_f1,
        report.perplexity,
        report.count
    );
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>, csv: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let reports: Vec<EvalReport> = runs.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let comparison = compare_report(&reports)?;
    let text = comparison.render_text();
    print!("{text}");
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    if let Some(p) = csv {
        write_text(p, &comparison.render_csv())?;
    }
    if let Some(p) = json {
        write_json(p, &comparison)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ExperimentManifest {
    command: &'static str,
    version: &'static str,
    config: CliConfig,
    n_per_tier: usize,
    corpus_seed: u64,
    seeds: Vec<u64>,
    corpus_sha256: String,
    train_records: usize,
    eval_records: usize,
    eval_set_sha256: String,
    vocab_size: usize,
    pretrain_losses: BTreeMap<u64, Vec<f64>>,
    logs: BTreeMap<u64, BTreeMap<TrainMode, TrainLog>>,
    timestamp_unix: u64,
}

fn cmd_experiment(cfg: &CliConfig, n_per_tier: usize, corpus_seed: u64, seeds: &[u64], out_dir: &Path) -> Result<()> {
    if n_per_tier == 0 || seeds.is_empty() {
        return Err(Error::InvalidConfig("experiment needs n_per_tier ≥ 1 and at least one seed".into()));
    }
    create_dir(out_dir)?;
    let corpus = synth_generate(n_per_tier, corpus_seed);
    let data = prepare(&corpus, &Lexicon::default_lexicon(), cfg.data.train_fraction, cfg.data.split_seed)?;
    let exp = cfg.experiment_config()?;
    let mut reports = Vec::new();
    let mut pretrain_losses = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for &seed in seeds {
        let outcome = run_seed(&data, &exp, seed)?;
        for (mode, report) in &outcome.reports {
            write_json(&out_dir.join(format!("seed-{seed}-{mode}.json")), report)?;
            reports.push(report.clone());
        }
        log::info!("seed {seed} done");
        pretrain_losses.insert(seed, outcome.pretrain_losses);
        logs.insert(seed, outcome.logs);
    }
    let comparison = compare_report(&reports)?;
    let text = comparison.render_text();
    print!("{text}");
    write_text(&out_dir.join("comparison.txt"), &text)?;
    write_text(&out_dir.join("comparison.csv"), &comparison.render_csv())?;
    write_json(&out_dir.join("comparison.json"), &comparison)?;
    let manifest = ExperimentManifest {
        command: "experiment",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        n_per_tier,
        corpus_seed,
        seeds: seeds.to_vec(),
        corpus_sha256: dataset_hash(&corpus),
        train_records: data.train.len(),
        eval_records: data.eval.len(),
        eval_set_sha256: dataset_hash(&data.eval),
        vocab_size: data.vocab.size(),
        pretrain_losses,
        logs,
        timestamp_unix: timestamp(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

/// Process entry point: parses arguments, runs, and maps failures to a
/// single `error[<code>]: <message>` line on stderr with exit status 1.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.code());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("sevcl").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"train": {"base_lr": 0.01, "batch_size": 8}, "lora": {"rank": 2}}"#).unwrap();
        let f = file.to_str().unwrap();
        let cfg = resolve_config(&parse(&["--config", f, "--batch-size", "4", "synth", "--n-per-tier", "1", "--out", "x"]))
            .unwrap();
        assert_eq!(cfg.train.base_lr, 0.01);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.lora.rank, 2);
        assert_eq!(cfg.train.stage_decay, TrainConfig::default().stage_decay);
        let cfg = resolve_config(&parse(&["--config", f, "train", "--data", "d", "--out-dir", "o", "--seed", "7", "--mode", "standard"]))
            .unwrap();
        assert_eq!((cfg.train.seed, cfg.train.mode), (7, TrainMode::Standard));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"train": {"base_rate": 0.01}}"#).unwrap();
        let err = resolve_config(&parse(&["--config", file.to_str().unwrap(), "--print-config"])).unwrap_err();
        assert_eq!(err.code(), "parse");
        let err = resolve_config(&parse(&["--lora-targets", "q,mlp", "--print-config"])).unwrap_err();
        assert_eq!(err.code(), "unknown-target");
        let err = resolve_config(&parse(&["--stage-decay", "1.5", "--print-config"])).unwrap_err();
        assert_eq!(err.code(), "invalid-config");
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = CliConfig::default();
        let back: CliConfig = serde_json::from_str(&to_json(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.lora_config().unwrap(), LoraConfig::default());
        assert_eq!(cfg.model_config(40), ModelConfig::new(40));
    }

    #[test]
    fn corpus_names_parse() {
        assert_eq!(parse_corpus("shuffled_pairs").unwrap(), PretrainCorpus::ShuffledPairs);
        assert!(parse_corpus("everything").is_err());
    }
}
