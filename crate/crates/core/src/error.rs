use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("missing required config key `{0}`")]
    MissingKey(String),
    #[error("config key `{key}` out of range: {reason}")]
    OutOfRange { key: String, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("latent contains non-finite values")]
    NonFiniteLatent,
    #[error("unknown skip mode `{0}` (expected multiply or concat)")]
    UnknownSkipMode(String),
    #[error("loss mode {0} needs a feature extractor")]
    MissingExtractor(&'static str),
    #[error("feature extractor not loaded")]
    ExtractorNotLoaded,
    #[error("{what} outside its domain: {value}")]
    DomainError { what: &'static str, value: f64 },

    #[error("empty input list")]
    EmptyList,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("metric needs both normal and anomalous labels")]
    SingleClassLabels,
    #[error("confidence interval needs at least {need} runs, got {got}")]
    TooFewRuns { got: usize, need: usize },

    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("semi-supervised contract violated: anomalous sample `{0}` in training data")]
    SemiSupervisedViolation(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("anomalous sample `{0}` passed to a training step")]
    AnomalousTrainingSample(String),
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: u64, term: &'static str },

    #[error("checkpoint format version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("weights incompatible with architecture: {0}")]
    ShapeIncompatible(String),
}

impl Error {
    pub(crate) fn shape(context: &str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn range(key: &str, reason: impl Into<String>) -> Self {
        Error::OutOfRange {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
