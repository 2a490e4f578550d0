use std::collections::HashMap;

use super::tables::{EDGE_TABLE, TRI_TABLE};
use super::{ReconError, ScalarGrid, TriangleMesh};

const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

const EDGE_CORNERS: [[usize; 2]; 12] =
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

/// A lattice edge: its lower endpoint (grid index) and axis.
type EdgeKey = (usize, u8);

/// Extracts the `tau` level set of `grid`.
///
/// A lattice point counts as inside when its value is at least `tau`.
/// Vertices are placed by linear interpolation on lattice edges whose
/// endpoints straddle `tau`, shared between neighboring cells, and triangles
/// wind counter-clockwise seen from outside. Zero-area triangles are dropped
/// and only referenced vertices are kept.
pub fn marching_cubes(grid: &ScalarGrid, tau: f64) -> Result<TriangleMesh, ReconError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ReconError::Threshold(tau));
    }
    let r = grid.resolution;
    let mut ids: HashMap<EdgeKey, u32> = HashMap::new();
    let mut mesh = TriangleMesh::default();
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let corner = |c: usize| [i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]];
                let mut case = 0usize;
                for c in 0..8 {
                    let [x, y, z] = corner(c);
                    if grid.value(x, y, z) < tau {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let keys: [EdgeKey; 3] = std::array::from_fn(|n| {
                        let [a, b] = EDGE_CORNERS[tri[n] as usize];
                        edge_key(grid, corner(a), corner(b))
                    });
                    let pos = keys.map(|key| edge_vertex(grid, key, tau));
                    if keys[0] == keys[1] || keys[1] == keys[2] || keys[0] == keys[2] || zero_area(&pos) {
                        continue;
                    }
                    let mut t = [0u32; 3];
                    for n in 0..3 {
                        t[n] = *ids.entry(keys[n]).or_insert_with(|| {
                            mesh.vertices.push(pos[n]);
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.triangles.push(t);
                }
            }
        }
    }
    Ok(mesh)
}

fn edge_key(grid: &ScalarGrid, a: [usize; 3], b: [usize; 3]) -> EdgeKey {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let axis = (0..3).find(|&d| lo[d] != hi[d]).expect("cell edge joins distinct corners");
    (grid.index(lo[0], lo[1], lo[2]), axis as u8)
}

/// Interpolates from the lower endpoint so both cells sharing an edge
/// compute the same position.
fn edge_vertex(grid: &ScalarGrid, (index, axis): EdgeKey, tau: f64) -> [f64; 3] {
    let r = grid.resolution;
    let lo = [index % r, (index / r) % r, index / (r * r)];
    let mut hi = lo;
    hi[axis as usize] += 1;
    let (v0, v1) = (grid.value(lo[0], lo[1], lo[2]), grid.value(hi[0], hi[1], hi[2]));
    let p0 = grid.point(lo[0], lo[1], lo[2]);
    let p1 = grid.point(hi[0], hi[1], hi[2]);
    let t = ((tau - v0) / (v1 - v0)).clamp(0.0, 1.0);
    let mut p = p0;
    let a = axis as usize;
    p[a] = p0[a] + t * (p1[a] - p0[a]);
    p
}

fn zero_area(p: &[[f64; 3]; 3]) -> bool {
    let u = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
    let v = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    n == [0.0; 3]
}
