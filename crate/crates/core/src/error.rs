use thiserror::Error;

use crate::executor::DeadlockReport;
use crate::schedule::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("concat_batch: empty list of parts")]
    EmptyConcat,

    #[error("layer {layer}: {reason}")]
    Layer { layer: String, reason: String },

    #[error("no forward cache for layer {layer}, micro-batch {micro_batch} (missing or already consumed)")]
    CacheMissing { layer: usize, micro_batch: usize },

    #[error("no saved backward-p2 inputs for layer {layer}, micro-batch {micro_batch} (missing or already consumed)")]
    SavedMissing { layer: usize, micro_batch: usize },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("invalid model partition: {0}")]
    Partition(String),

    #[error("invalid schedule configuration: {0}")]
    ScheduleConfig(String),

    #[error("schedule violation: {0}")]
    Schedule(Violation),

    #[error("invalid batch: {0}")]
    Batch(String),

    #[error("{0}")]
    Deadlock(DeadlockReport),

    #[error("rank {rank}: {reason}")]
    Worker { rank: usize, reason: String },

    #[error("timeline is empty")]
    EmptyTimeline,

    #[error("rank {rank}, instruction {index}: {counter} counter underflow")]
    MemoryUnderflow {
        rank: usize,
        index: usize,
        counter: &'static str,
    },

    #[error("rank {rank}: {activation} activation and {interm_deriv} derivative units still held at the flush")]
    MemoryNotDrained {
        rank: usize,
        activation: String,
        interm_deriv: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn layer(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            reason: reason.into(),
        }
    }
}
