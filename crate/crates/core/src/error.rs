use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label error: label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("connectivity error: {0}")]
    Connectivity(String),

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("augmentation policy error: {0}")]
    Policy(String),

    /// `expert` is the teacher index, or the run index during evaluation.
    #[error("training error: network {expert} diverged at step {step} (loss {loss})")]
    Training { expert: usize, step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("state error: {0}")]
    State(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("unroll error: non-finite student loss at inner step {step}")]
    Unroll { step: usize },

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("init error: {0}")]
    Init(String),

    #[error("ingestion error at byte {offset}: {message}")]
    Ingestion { offset: u64, message: String },

    #[error("scheduler error: {0}")]
    Scheduler(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
