use thiserror::Error;

#[derive(Error, Debug)]
pub enum SodError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for SodError {
    fn from(e: image::ImageError) -> Self {
        SodError::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SodError>;
