use thiserror::Error;

pub type Result<T> = std::result::Result<T, SprintError>;

#[derive(Debug, Error)]
pub enum SprintError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss at {phase} iteration {iteration}: {diagnostic}")]
    NonFiniteLoss {
        phase: String,
        iteration: u64,
        diagnostic: String,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(std::io::Error),

    #[error("json error: {0}")]
    Json(serde_json::Error),

    #[error("image error: {0}")]
    Image(image::ImageError),
}

// Plain conversions: the wrapped error is already in the message, so it is
// not exposed again as a source.
impl From<std::io::Error> for SprintError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for SprintError {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}

impl From<image::ImageError> for SprintError {
    fn from(e: image::ImageError) -> Self {
        Self::Image(e)
    }
}

pub(crate) fn shape_check(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SprintError::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
        })
    }
}
