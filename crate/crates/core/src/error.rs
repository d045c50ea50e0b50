use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bfp encoding: {0}")]
    Encoding(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
