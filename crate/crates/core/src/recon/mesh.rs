use std::collections::HashMap;
use std::io::Write;

use rand::Rng;

use super::ReconError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        let n = cross(sub(&b, &a), sub(&c, &a));
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Undirected edges with the number of triangles using each.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// Signed enclosed volume; positive when triangles wind outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                let n = cross(b, c);
                (a[0] * n[0] + a[1] * n[1] + a[2] * n[2]) / 6.0
            })
            .sum()
    }

    /// `n` points uniform by area over the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<[f64; 3]>, ReconError> {
        if self.triangles.is_empty() {
            return Err(ReconError::EmptyMesh);
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += self.triangle_area(t);
            cumulative.push(total);
        }
        Ok((0..n)
            .map(|_| {
                let pick = rng.gen::<f64>() * total;
                let t = cumulative.partition_point(|&c| c <= pick).min(self.triangles.len() - 1);
                let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
                let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                std::array::from_fn(|i| a[i] + u * (b[i] - a[i]) + v * (c[i] - a[i]))
            })
            .collect())
    }

    /// Text OBJ with 1-based face indices.
    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()
    }
}
