use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible for an operation. Names the operation and
    /// both shapes so the failing call site is identifiable from the message.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Spatial geometry violates a precondition (divisibility, kernel fit).
    #[error("geometry: {0}")]
    Geometry(String),

    /// Invalid operation contract (non-scalar backward seed, bad axis, ...).
    #[error("contract: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Class label outside the allowed set.
    #[error("label: {0}")]
    Label(String),

    /// Invalid configuration value.
    #[error("config: {0}")]
    Config(String),

    /// Dataset layout or file pairing problem.
    #[error("data: {0}")]
    Data(String),

    /// Checkpoint encoding/decoding or shape-validation failure.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training aborted (non-finite loss or gradient).
    #[error("training: {0}")]
    Train(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
