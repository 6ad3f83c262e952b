//! Joint optimization of both backbones and the fusion head.

mod config;
mod loss;
mod optim;
mod trainer;
mod weights;

use std::path::PathBuf;

pub use config::{EarlyStopMetric, TrainConfig};
pub use loss::weighted_cross_entropy;
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use trainer::{
    run_multi_seed, train, train_with, EpochRecord, SeedRun, TrainOptions, TrainState, Validator, BEST_CHECKPOINT,
    LOG_FILE, STATE_FILE,
};
pub use weights::{compute_class_weights, ClassWeighting, ClassWeights};

use crate::data::DataError;
use crate::evaluation::EvalError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("every class count is zero")]
    AllZeroCounts,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize, checkpoint: Option<PathBuf> },
    #[error("training cancelled")]
    Cancelled,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
