use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dtype mismatch: {0:?} vs {1:?}")]
    DType(crate::ctensor::DType, crate::ctensor::DType),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("empty reduction")]
    EmptyReduction,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("constant magnitude input")]
    ConstantMagnitude,

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss must be real, imaginary part {0}")]
    NonRealLoss(f64),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("bad tensor stream: {0}")]
    Format(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
