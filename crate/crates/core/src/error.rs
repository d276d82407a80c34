use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // event ingest
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("event ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("timestamp {t} at record {index} precedes previous timestamp {prev}")]
    NonMonotonicTime { index: usize, t: u64, prev: u64 },
    #[error("empty time window [{t_start}, {t_end}]")]
    EmptyWindow { t_start: u64, t_end: u64 },
    #[error("invalid scene: {0}")]
    InvalidSpec(String),

    // tensors and autodiff
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("batch normalization in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("timestep {t} out of range for {steps} normalization slots")]
    TimestepOutOfRange { t: usize, steps: usize },

    // neurons
    #[error("firing threshold must be positive, got {0}")]
    NonPositiveThreshold(f32),
    #[error("backward requested without saved forward state")]
    MissingForwardState,

    // networks
    #[error("invalid hybrid configuration: {0}")]
    InvalidHybridConfig(String),
    #[error("unsupported network family `{0}`")]
    UnsupportedFamily(String),

    // losses
    #[error("no valid pixels after warping")]
    NoValidPixels,
    #[error("ground truth has no pixels with non-zero flow")]
    NoLabeledPixels,
    #[error("event mask is empty")]
    EmptyMask,

    // training
    #[error("loss diverged at epoch {epoch}: {value}")]
    DivergedLoss { epoch: usize, value: f32 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("crop {crop} larger than sample {height}x{width}")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // energy
    #[error("activation trace missing for layer `{0}`")]
    TraceMissing(String),
    #[error("buffer capacity must be non-zero")]
    CapacityZero,
    #[error("invalid energy table: {0}")]
    InvalidEnergyTable(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
