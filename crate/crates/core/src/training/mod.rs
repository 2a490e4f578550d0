//! Procedural training data, the loss, the optimizer and the training loop.

mod optim;
mod shapes;
mod trainer;

pub use optim::{adam_step, bce_loss, AdamHyper, AdamState, PROBABILITY_CLAMP};
pub use shapes::{random_shape, sample_queries, synth_shape, ShapeFamily, ShapePrimitive, ShapeSpec, NEAR_SURFACE_SD};
pub use trainer::{
    loss_trend_decreasing, train, train_with, write_metrics_csv, LrSchedule, MetricsRow, TrainingConfig,
    TrainingOutcome, ValidationSet, ValidationShape, METRICS_HEADER,
};

use crate::diffcore::DiffError;
use crate::geometry::GeometryError;
use crate::implicitnet::ModelError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("{pred} predictions for {gt} labels")]
    Length { pred: usize, gt: usize },
    #[error("loss became non-finite ({loss}) at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<DiffError> for TrainingError {
    fn from(e: DiffError) -> Self {
        TrainingError::Model(e.into())
    }
}

#[cfg(test)]
mod tests;
