use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("incompatible weights: {0}")]
    IncompatibleWeights(String),

    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad or corrupt input data rather than a
    /// caller mistake or an internal fault.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::CorruptData(_) | Error::Io(_) | Error::Json(_) | Error::DegenerateVolume(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
