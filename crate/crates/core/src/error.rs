use thiserror::Error;

/// Errors raised across the simulator, fitting, flow and metrics layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("integration blew up at step {step}: {coordinate} = {value}")]
    Blowup {
        step: usize,
        coordinate: &'static str,
        value: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("fit diverged after {iters} iterations: {reason}")]
    Diverged {
        iters: usize,
        reason: String,
        trace: Vec<crate::fit::TraceRow>,
    },

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
