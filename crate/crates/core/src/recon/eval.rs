use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_grid, marching_cubes, volumetric_iou, Bounds, Field, ReconError, DEFAULT_CHUNK};
use crate::training::ShapeSpec;

/// Surface samples on each side of the Chamfer distance.
pub const CHAMFER_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Uniform IoU queries in the bounds.
    pub n_eval: usize,
    pub resolution: usize,
    pub tau: f64,
    pub bounds: Bounds,
    pub chamfer_samples: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_eval: 10_000,
            resolution: 64,
            tau: 0.5,
            bounds: Bounds::unit_cube(),
            chamfer_samples: CHAMFER_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub iou: f64,
    /// Infinite when the extracted mesh is empty.
    pub chamfer_l1: f64,
    pub vertices: usize,
    pub triangles: usize,
}

/// Scores `field` against the exact shape: IoU over uniform queries and
/// Chamfer-L1 between the extracted mesh and the true surface.
pub fn eval_reconstruction<F: Field + ?Sized>(
    field: &F,
    spec: &ShapeSpec,
    settings: &EvalSettings,
) -> Result<EvalMetrics, ReconError> {
    if settings.n_eval == 0 {
        return Err(ReconError::Empty("evaluation query set"));
    }
    if settings.chamfer_samples == 0 {
        return Err(ReconError::Empty("chamfer sample set"));
    }
    settings.bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let b = settings.bounds;
    let queries: Vec<[f64; 3]> =
        (0..settings.n_eval).map(|_| std::array::from_fn(|a| rng.gen_range(b.min[a]..b.max[a]))).collect();
    let truth = spec.occupancy(&queries);
    let pred: Vec<f64> =
        field.evaluate(&queries)?.into_iter().map(|p| if p >= settings.tau { 1.0 } else { 0.0 }).collect();
    let iou = volumetric_iou(&pred, &truth)?;
    let grid = evaluate_grid(field, settings.resolution, b, DEFAULT_CHUNK)?;
    let mesh = marching_cubes(&grid, settings.tau)?;
    let chamfer = if mesh.is_empty() {
        f64::INFINITY
    } else {
        let on_mesh = mesh.sample_surface(&mut rng, settings.chamfer_samples)?;
        let on_shape = spec.sample_surface(&mut rng, settings.chamfer_samples)?;
        super::chamfer_l1(&on_mesh, &on_shape)?
    };
    Ok(EvalMetrics { iou, chamfer_l1: chamfer, vertices: mesh.vertices.len(), triangles: mesh.triangles.len() })
}
