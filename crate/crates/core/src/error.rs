use std::path::PathBuf;

use thiserror::Error;

use crate::severity::SeverityLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("phrase `{phrase}` appears in both the {first} and {second} tiers")]
    DuplicateAcrossTiers {
        phrase: String,
        first: SeverityLabel,
        second: SeverityLabel,
    },

    #[error("record {0} has no severity label")]
    MissingLabel(u64),

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("loss mask has no active position")]
    AllMasked,

    #[error("graph was already consumed by a backward pass")]
    AlreadyConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("sequence of length {len} exceeds the context window of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("unknown adapter target `{0}`")]
    UnknownTarget(String),

    #[error("curriculum stage {0} has no records")]
    EmptyStage(usize),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("adapter checkpoint needs its base model: {0}")]
    MissingBase(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("reports were computed on different evaluation sets ({0} vs {1})")]
    EvalSetMismatch(String, String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Stable kebab-case name of the variant, for machine-readable reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateAcrossTiers { .. } => "duplicate-across-tiers",
            Error::MissingLabel(_) => "missing-label",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::AllMasked => "all-masked",
            Error::AlreadyConsumed => "already-consumed",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::EmptyCorpus => "empty-corpus",
            Error::ContextOverflow { .. } => "context-overflow",
            Error::UnknownTarget(_) => "unknown-target",
            Error::EmptyStage(_) => "empty-stage",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::CorruptFile(_) => "corrupt-file",
            Error::MissingBase(_) => "missing-base",
            Error::EmptyEvalSet => "empty-eval-set",
            Error::EvalSetMismatch(..) => "eval-set-mismatch",
            Error::InvalidConfig(_) => "invalid-config",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }
}
