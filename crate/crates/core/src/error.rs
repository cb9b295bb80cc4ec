use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Input spatial dimensions are not divisible by the pyramid stride.
    #[error("dimension not divisible by {divisor}: {}", format_axes(.bad_axes, .height, .width))]
    DimensionNotDivisible {
        height: usize,
        width: usize,
        divisor: usize,
        /// Offending axes, subset of {"height", "width"}.
        bad_axes: Vec<&'static str>,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Alpha inversion hit alpha == 1 (division by zero) at `pixels` pixels.
    #[error("alpha singularity: {pixels} pixel(s) with alpha = 1 make background inversion undefined")]
    AlphaSingularity { pixels: usize },

    #[error("empty dataset at {root}")]
    EmptyDataset { root: String },

    #[error("orphan sample '{id}': {detail}")]
    OrphanSample { id: String, detail: String },

    #[error("bucket quota unreachable: {detail}")]
    QuotaUnreachable { detail: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("prediction/sample count mismatch: {predictions} predictions for {samples} samples")]
    CountMismatch { predictions: usize, samples: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("unknown config key '{key}'; valid keys: {}", valid.join(", "))]
    UnknownConfigKey { key: String, valid: Vec<String> },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

fn format_axes(bad: &[&'static str], height: &usize, width: &usize) -> String {
    let mut parts = Vec::new();
    for axis in bad {
        match *axis {
            "height" => parts.push(format!("height={height}")),
            "width" => parts.push(format!("width={width}")),
            other => parts.push(other.to_string()),
        }
    }
    parts.join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether this error is a caller mistake (bad input/config) as opposed
    /// to a runtime failure. Drives the CLI exit-code contract.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionNotDivisible { .. }
                | Error::ShapeMismatch { .. }
                | Error::NonFinite { .. }
                | Error::InvalidParameter(_)
                | Error::UnknownConfigKey { .. }
                | Error::Config(_)
                | Error::CountMismatch { .. }
                | Error::EmptyDataset { .. }
                | Error::MissingCheckpoint(_)
        )
    }
}
