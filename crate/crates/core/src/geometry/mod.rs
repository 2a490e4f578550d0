//! Point clouds, similarity transforms and neighborhood queries.

pub mod io;
mod neighbors;
mod transform;

pub use neighbors::{farthest_point_sample, knn, knn_table, nearest_indices, squared_distance, KnnGraph};
pub use transform::{
    det3, matmul3, quaternion_to_matrix, random_rotation, random_transform, transpose3, Mat3, SimilarityTransform,
    TransformConstraints, TransformMode, IDENTITY3,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("cannot take {requested} samples from {available} points")]
    SampleCount { requested: usize, available: usize },
    #[error("index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid transform: {0}")]
    InvalidTransform(&'static str),
    #[error("infeasible transform constraints: {0}")]
    InfeasibleConstraints(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for GeometryError {
    fn from(e: std::io::Error) -> Self {
        GeometryError::Io(e.to_string())
    }
}

/// A non-empty list of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self { points })
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_trusted(points: Vec<[f64; 3]>) -> Self {
        debug_assert!(!points.is_empty());
        Self { points }
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<[f64; 3]> {
        self.points
    }

    pub fn select(&self, indices: &[usize]) -> Result<PointCloud, GeometryError> {
        let n = self.points.len();
        let pts = indices
            .iter()
            .map(|&i| self.points.get(i).copied().ok_or(GeometryError::IndexOutOfRange { index: i, len: n }))
            .collect::<Result<Vec<_>, _>>()?;
        PointCloud::new(pts)
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|x| x / self.points.len() as f64)
    }
}
