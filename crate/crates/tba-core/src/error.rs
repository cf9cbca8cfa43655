//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the codec, model, solver and harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Bit codec misuse: bad word width, non-binary payload, length mismatch.
    #[error("codec error: {0}")]
    Codec(String),

    /// Two tensors or matrices that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of its documented range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A dataset is empty or internally inconsistent.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training produced non-finite parameters or loss.
    #[error("training diverged: {0}")]
    Training(String),

    /// Checkpoint bytes do not start with the expected magic.
    #[error("bad checkpoint magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    /// Checkpoint format version is newer than this build understands.
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),

    /// Checkpoint or CSV payload ended before the declared contents.
    #[error("truncated input: {0}")]
    Truncated(String),

    /// The ADMM iterate left the finite range and cannot continue. Carries
    /// the loss trace recorded up to that point, rendered as CSV.
    #[error("solver diverged at iteration {iteration}: {detail}")]
    SolverDiverged {
        iteration: usize,
        detail: String,
        trace_csv: String,
    },

    /// An enumeration request exceeds the hard guard on search size.
    #[error("search scope too large: {0}")]
    ScopeTooLarge(String),

    /// Harness setup could not satisfy the request (targets, splits, ...).
    #[error("setup error: {0}")]
    Setup(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}
