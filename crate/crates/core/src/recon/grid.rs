use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ReconError;
use crate::geometry::{PointCloud, SimilarityTransform};
use crate::implicitnet::{encode_cloud, forward_encoded, EncodingValues, Model};
use crate::training::ShapeSpec;

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, ReconError> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn unit_cube() -> Self {
        Self { min: [-0.5; 3], max: [0.5; 3] }
    }

    pub fn validate(&self) -> Result<(), ReconError> {
        if (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]) {
            Ok(())
        } else {
            Err(ReconError::Bounds(*self))
        }
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self::unit_cube()
    }
}

/// Anything that maps points to occupancy values.
pub trait Field: Sync {
    fn evaluate(&self, points: &[[f64; 3]]) -> Result<Vec<f64>, ReconError>;
}

/// The exact indicator of a procedural shape.
impl Field for ShapeSpec {
    fn evaluate(&self, points: &[[f64; 3]]) -> Result<Vec<f64>, ReconError> {
        Ok(self.occupancy(points))
    }
}

/// A trained model conditioned on one observation.
///
/// With a transform `T`, the model observes `T(X)` and is queried at `T(p)`,
/// so results stay in the frame of the untransformed input.
pub struct ModelField<'a> {
    model: &'a Model,
    encoded: EncodingValues,
    transform: Option<SimilarityTransform>,
    pub chunk: usize,
}

pub const DEFAULT_CHUNK: usize = 2048;

impl<'a> ModelField<'a> {
    pub fn new(model: &'a Model, cloud: &PointCloud) -> Result<Self, ReconError> {
        Ok(Self { model, encoded: encode_cloud(model, cloud)?, transform: None, chunk: DEFAULT_CHUNK })
    }

    pub fn transformed(
        model: &'a Model,
        cloud: &PointCloud,
        transform: SimilarityTransform,
    ) -> Result<Self, ReconError> {
        Ok(Self {
            model,
            encoded: encode_cloud(model, &transform.apply(cloud))?,
            transform: Some(transform),
            chunk: DEFAULT_CHUNK,
        })
    }
}

impl Field for ModelField<'_> {
    fn evaluate(&self, points: &[[f64; 3]]) -> Result<Vec<f64>, ReconError> {
        let out = match &self.transform {
            Some(t) => forward_encoded(self.model, &self.encoded, &t.apply_points(points), self.chunk),
            None => forward_encoded(self.model, &self.encoded, points, self.chunk),
        };
        Ok(out?)
    }
}

/// Samples of a field on a regular lattice, x varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    pub resolution: usize,
    pub bounds: Bounds,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn from_fn(resolution: usize, bounds: Bounds, f: impl Fn([f64; 3]) -> f64) -> Result<Self, ReconError> {
        check_lattice(resolution, &bounds)?;
        let values = lattice_points(resolution, &bounds).into_iter().map(f).collect();
        Self::new(resolution, bounds, values)
    }

    pub fn new(resolution: usize, bounds: Bounds, values: Vec<f64>) -> Result<Self, ReconError> {
        check_lattice(resolution, &bounds)?;
        if values.len() != resolution.pow(3) {
            return Err(ReconError::GridSize { expected: resolution.pow(3), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ReconError::NonFinite);
        }
        Ok(Self { resolution, bounds, values })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        lattice_point(self.resolution, &self.bounds, [i, j, k])
    }

    pub fn cell_size(&self) -> [f64; 3] {
        let r = (self.resolution - 1) as f64;
        std::array::from_fn(|a| (self.bounds.max[a] - self.bounds.min[a]) / r)
    }

    pub fn cell_diagonal(&self) -> f64 {
        let c = self.cell_size();
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    }
}

fn check_lattice(resolution: usize, bounds: &Bounds) -> Result<(), ReconError> {
    if resolution < 2 {
        return Err(ReconError::Resolution(resolution));
    }
    bounds.validate()
}

#[inline]
fn lattice_point(resolution: usize, b: &Bounds, ijk: [usize; 3]) -> [f64; 3] {
    let r = (resolution - 1) as f64;
    std::array::from_fn(|a| b.min[a] + (b.max[a] - b.min[a]) * (ijk[a] as f64 / r))
}

/// All `R^3` lattice points in grid order.
pub fn lattice_points(resolution: usize, bounds: &Bounds) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(resolution.pow(3));
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                out.push(lattice_point(resolution, bounds, [i, j, k]));
            }
        }
    }
    out
}

/// Evaluates `field` on the lattice, `chunk` points per call, chunks in
/// parallel. The result does not depend on `chunk`.
pub fn evaluate_grid<F: Field + ?Sized>(
    field: &F,
    resolution: usize,
    bounds: Bounds,
    chunk: usize,
) -> Result<ScalarGrid, ReconError> {
    check_lattice(resolution, &bounds)?;
    let points = lattice_points(resolution, &bounds);
    let parts = points.par_chunks(chunk.max(1)).map(|c| field.evaluate(c)).collect::<Result<Vec<_>, _>>()?;
    ScalarGrid::new(resolution, bounds, parts.concat())
}

/// Occupancy grid of `model` conditioned on `cloud`.
pub fn evaluate_model_grid(
    model: &Model,
    cloud: &PointCloud,
    resolution: usize,
    bounds: Bounds,
) -> Result<ScalarGrid, ReconError> {
    evaluate_grid(&ModelField::new(model, cloud)?, resolution, bounds, DEFAULT_CHUNK)
}
