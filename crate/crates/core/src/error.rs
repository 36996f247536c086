use thiserror::Error;

/// Errors produced by the core pipeline.
#[derive(Debug, Error)]
pub enum GfError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("infeasible budget {budget}: feasible range is [{min_cost}, {max_cost}]")]
    InfeasibleBudget {
        budget: f64,
        min_cost: f64,
        max_cost: f64,
    },

    #[error("{path}: {kind}")]
    Format { path: String, kind: FormatError },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What went wrong while decoding a binary artifact.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    Version(u32),

    #[error("truncated payload at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: u64, needed: u64 },

    #[error("label {label} out of range for {num_classes} classes (sample {index})")]
    LabelOutOfRange {
        label: u32,
        num_classes: u32,
        index: usize,
    },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("malformed field: {0}")]
    Field(String),
}

pub type Result<T> = std::result::Result<T, GfError>;

impl GfError {
    pub fn shape(msg: impl Into<String>) -> Self {
        GfError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        GfError::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        GfError::Input(msg.into())
    }
}
