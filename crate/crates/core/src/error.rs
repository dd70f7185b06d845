use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the zero threshold")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("feature-norm statistics used before initialization")]
    UninitializedStats,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("identity has no entries")]
    EmptyIdentity,

    #[error("identity `{identity}` appears in both `{first}` and `{second}`")]
    DuplicateIdentityAcrossSources {
        identity: String,
        first: String,
        second: String,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("epoch {epoch} outside schedule of {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("manifest has no samples")]
    EmptyManifest,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    DivergenceDetected {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("frozen teacher parameters changed during distillation")]
    FrozenViolation,

    #[error("checkpoint format: {0}")]
    FormatVersionMismatch(String),

    #[error("sample `{0}` not found")]
    MissingSample(String),

    #[error("empty input")]
    EmptyInput,

    #[error("need at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },

    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),

    #[error("skewed error ratio undefined: best group accuracy is 100%")]
    DegenerateDenominator,

    #[error("group `{group}`: {reason}")]
    InsufficientIdentities { group: String, reason: String },

    #[error("pairs per group must be even, got {0}")]
    OddPairCount(usize),

    #[error("fixture {path}:{line}: {reason}")]
    FixtureFormat {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("parse error in {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than by the data or the math.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::Parse { .. } | Error::FixtureFormat { .. }
        )
    }
}
