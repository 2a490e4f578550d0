use rayon::prelude::*;

use super::ReconError;
use crate::geometry::squared_distance;

/// `|pred AND gt| / |pred OR gt|` over `{0, 1}` labels (any value `>= 0.5`
/// counts as 1); 1 when both are empty.
pub fn volumetric_iou(pred: &[f64], gt: &[f64]) -> Result<f64, ReconError> {
    if pred.len() != gt.len() {
        return Err(ReconError::Length { a: pred.len(), b: gt.len() });
    }
    if pred.is_empty() {
        return Err(ReconError::Empty("label list"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Uniform bucket grid over a point set for exact nearest-neighbor queries.
struct Buckets<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    /// Point indices grouped by cell; cell `c` owns `order[start[c]..start[c + 1]]`.
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Buckets<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        // About two points per occupied cell on a surface sample.
        let cell = if extent > 0.0 { extent / (points.len() as f64 / 2.0).sqrt().max(1.0) } else { 1.0 };
        let dims = std::array::from_fn(|a| ((hi[a] - lo[a]) / cell).floor() as i64 + 1);
        let mut b = Self { points, origin: lo, cell, dims, start: Vec::new(), order: Vec::new() };
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let ids: Vec<usize> = points.iter().map(|p| b.flat(b.cell_of(p))).collect();
        let mut start = vec![0usize; ncells + 1];
        for &c in &ids {
            start[c + 1] += 1;
        }
        for c in 0..ncells {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        b.start = start;
        b.order = order;
        b
    }

    fn cell_of(&self, p: &[f64; 3]) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        let c: [i64; 3] = std::array::from_fn(|a| c[a].clamp(0, self.dims[a] - 1));
        (c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])) as usize
    }

    /// Exact minimum squared distance from `q` to the set.
    fn nearest_squared(&self, q: &[f64; 3]) -> f64 {
        let c = self.cell_of(q);
        let mut best = f64::INFINITY;
        // Chebyshev distance (in cells) from the query's cell to the grid.
        let first = (0..3).map(|a| (-c[a]).max(c[a] - (self.dims[a] - 1)).max(0)).max().unwrap_or(0);
        let last = (0..3).map(|a| c[a].abs().max((self.dims[a] - 1 - c[a]).abs())).max().unwrap_or(0);
        for ring in first..=last {
            // Any point in ring `ring` or beyond is at least
            // `(ring - 1) * cell` away along some axis.
            let reach = (ring - 1).max(0) as f64 * self.cell;
            if best < reach * reach {
                break;
            }
            let range = |a: usize| (c[a] - ring).max(0)..=(c[a] + ring).min(self.dims[a] - 1);
            for z in range(2) {
                for y in range(1) {
                    for x in range(0) {
                        let d = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if d != ring {
                            continue;
                        }
                        let f = self.flat([x, y, z]);
                        for &i in &self.order[self.start[f]..self.start[f + 1]] {
                            best = best.min(squared_distance(q, &self.points[i]));
                        }
                    }
                }
            }
        }
        best
    }
}

fn mean_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let b = Buckets::new(to);
    let d: Vec<f64> = from.par_iter().map(|q| b.nearest_squared(q).sqrt()).collect();
    d.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer-L1: the average of the two mean nearest-neighbor
/// Euclidean distances.
pub fn chamfer_l1(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64, ReconError> {
    if a.is_empty() || b.is_empty() {
        return Err(ReconError::Empty("point set"));
    }
    Ok(0.5 * mean_nearest(a, b) + 0.5 * mean_nearest(b, a))
}
