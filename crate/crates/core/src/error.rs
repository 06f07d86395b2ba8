use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance ({var_x}, {var_y}, {cov_xy}) is not positive definite")]
    NotPositiveDefinite { var_x: f64, var_y: f64, cov_xy: f64 },

    #[error("kernel color {0:?} is outside [0, 1]")]
    InvalidColor([f64; 3]),

    #[error("kernel {index} at ({x}, {y}) lies outside the field domain")]
    PositionOutOfBounds { index: usize, x: f64, y: f64 },

    #[error("field has no kernels")]
    EmptyField,

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("output size {width}x{height} exceeds the {cap}x{cap} cap")]
    DimensionOverflow { width: u64, height: u64, cap: u32 },

    #[error("invalid dimensions: {0}")]
    DimensionError(String),

    #[error("invalid render request: {0}")]
    InvalidRequest(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no covariance samples in corpus")]
    EmptyCorpus,

    #[error("channel {channel} has {count} samples, need at least 2")]
    InsufficientSamples { channel: &'static str, count: usize },

    #[error("dictionary sampling gave up after {attempts} consecutive rejections")]
    RejectionOverflow { attempts: u64 },

    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),

    #[error("loss became non-finite at iteration {iteration} (best PSNR so far {best_psnr})")]
    NonFiniteLoss { iteration: usize, best_psnr: String },

    #[error("value {0} outside [0, 1]")]
    RangeError(f64),

    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
