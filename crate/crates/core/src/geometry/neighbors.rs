//! Brute-force farthest-point sampling and k-nearest-neighbor queries.
//!
//! All orderings are total: ties in distance are broken by the lower point
//! index, so results are reproducible bit for bit.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::GeometryError;

#[inline]
pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest-point sampling starting from `start`.
///
/// Returns `m` indices in selection order. Each pick maximizes the distance
/// to the already selected set.
pub fn farthest_point_sample(points: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>, GeometryError> {
    let n = points.len();
    if n == 0 {
        return Err(GeometryError::EmptyCloud);
    }
    if m == 0 || m > n {
        return Err(GeometryError::SampleCount { requested: m, available: n });
    }
    if start >= n {
        return Err(GeometryError::IndexOutOfRange { index: start, len: n });
    }
    let mut selected = vec![false; n];
    let mut min_d: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[start])).collect();
    let mut order = Vec::with_capacity(m);
    order.push(start);
    selected[start] = true;
    while order.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !selected[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        selected[best] = true;
        order.push(best);
        let pb = points[best];
        for (d, p) in min_d.iter_mut().zip(points) {
            let nd = squared_distance(p, &pb);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(order)
}

/// Neighborhood of one query point.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub query: [f64; 3],
    /// Sorted by ascending distance, then index.
    pub neighbors: Vec<usize>,
    /// `points[neighbors[j]] - query`.
    pub displacements: Vec<[f64; 3]>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

fn key_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `min(k, n)` nearest indices to `query`, written into `out`.
fn nearest_into(query: &[f64; 3], points: &[[f64; 3]], k: usize, scratch: &mut Vec<(f64, usize)>, out: &mut [usize]) {
    scratch.clear();
    scratch.extend(points.iter().enumerate().map(|(i, p)| (squared_distance(p, query), i)));
    let k = k.min(points.len());
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, key_cmp);
    }
    let head = &mut scratch[..k];
    head.sort_unstable_by(key_cmp);
    for (o, (_, i)) in out.iter_mut().zip(head.iter()) {
        *o = *i;
    }
}

/// k-nearest neighbors of `query`; `k` is clamped to the cloud size.
pub fn knn(query: [f64; 3], points: &[[f64; 3]], k: usize) -> Result<KnnGraph, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    if k == 0 {
        return Err(GeometryError::SampleCount { requested: 0, available: points.len() });
    }
    let k = k.min(points.len());
    let mut neighbors = vec![0; k];
    nearest_into(&query, points, k, &mut Vec::with_capacity(points.len()), &mut neighbors);
    let displacements = neighbors
        .iter()
        .map(|&i| {
            let p = points[i];
            [p[0] - query[0], p[1] - query[1], p[2] - query[2]]
        })
        .collect();
    Ok(KnnGraph { query, neighbors, displacements })
}

/// Row-major `[queries.len(), k_eff]` neighbor table with `k_eff = min(k, n)`.
pub fn knn_table(queries: &[[f64; 3]], points: &[[f64; 3]], k: usize) -> Result<(Vec<usize>, usize), GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    if k == 0 {
        return Err(GeometryError::SampleCount { requested: 0, available: points.len() });
    }
    let k = k.min(points.len());
    let mut table = vec![0; queries.len() * k];
    table.par_chunks_mut(k.max(1) * 64).enumerate().for_each(|(chunk, out)| {
        let mut scratch = Vec::with_capacity(points.len());
        for (j, row) in out.chunks_mut(k).enumerate() {
            nearest_into(&queries[chunk * 64 + j], points, k, &mut scratch, row);
        }
    });
    Ok((table, k))
}

/// Index of the single nearest point for every query (ties: lowest index).
pub fn nearest_indices(queries: &[[f64; 3]], points: &[[f64; 3]]) -> Result<Vec<usize>, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, p) in points.iter().enumerate() {
                let d = squared_distance(p, q);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}
