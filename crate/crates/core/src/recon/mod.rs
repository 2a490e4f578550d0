//! Dense field evaluation, iso-surface extraction and reconstruction
//! metrics.

mod eval;
mod grid;
mod mc;
mod mesh;
mod metrics;
mod tables;

pub use eval::{eval_reconstruction, EvalMetrics, EvalSettings, CHAMFER_SAMPLES};
pub use grid::{
    evaluate_grid, evaluate_model_grid, lattice_points, Bounds, Field, ModelField, ScalarGrid, DEFAULT_CHUNK,
};
pub use mc::marching_cubes;
pub use mesh::TriangleMesh;
pub use metrics::{chamfer_l1, volumetric_iou};

use crate::implicitnet::ModelError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ReconError {
    #[error("grid resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("degenerate bounds {0:?}")]
    Bounds(Bounds),
    #[error("grid holds {got} values, expected {expected}")]
    GridSize { expected: usize, got: usize },
    #[error("grid contains non-finite values")]
    NonFinite,
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("length mismatch: {a} vs {b}")]
    Length { a: usize, b: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Shape(String),
}

impl From<crate::training::TrainingError> for ReconError {
    fn from(e: crate::training::TrainingError) -> Self {
        ReconError::Shape(e.to_string())
    }
}
