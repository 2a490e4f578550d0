//! Procedural shapes: unions of spheres, boxes and capsules with exact
//! occupancy.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::geometry::PointCloud;

const HALF_CUBE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapePrimitive {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
    Capsule { p0: [f64; 3], p1: [f64; 3], radius: f64 },
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = norm(&v);
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Two unit vectors completing `axis` to an orthonormal frame.
fn frame(axis: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let c = [
        axis[1] * helper[2] - axis[2] * helper[1],
        axis[2] * helper[0] - axis[0] * helper[2],
        axis[0] * helper[1] - axis[1] * helper[0],
    ];
    let n = norm(&c);
    let u = [c[0] / n, c[1] / n, c[2] / n];
    let w = [axis[1] * u[2] - axis[2] * u[1], axis[2] * u[0] - axis[0] * u[2], axis[0] * u[1] - axis[1] * u[0]];
    (u, w)
}

impl ShapePrimitive {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Self::Sphere { center, radius } => finite(center) && radius.is_finite() && *radius > 0.0,
            Self::Box { center, half_extents } => {
                finite(center) && half_extents.iter().all(|h| h.is_finite() && *h > 0.0)
            }
            Self::Capsule { p0, p1, radius } => finite(p0) && finite(p1) && radius.is_finite() && *radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(TrainingError::Shape(format!("degenerate primitive {self:?}")))
        }
    }

    /// Boundary counts as inside.
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        match self {
            Self::Sphere { center, radius } => norm(&sub(p, center)) <= *radius,
            Self::Box { center, half_extents } => (0..3).all(|i| (p[i] - center[i]).abs() <= half_extents[i]),
            Self::Capsule { p0, p1, radius } => segment_distance(p, p0, p1) <= *radius,
        }
    }

    /// Strictly inside, used to reject surface samples hidden by the union.
    fn contains_strictly(&self, p: &[f64; 3]) -> bool {
        match self {
            Self::Sphere { center, radius } => norm(&sub(p, center)) < *radius,
            Self::Box { center, half_extents } => (0..3).all(|i| (p[i] - center[i]).abs() < half_extents[i]),
            Self::Capsule { p0, p1, radius } => segment_distance(p, p0, p1) < *radius,
        }
    }

    pub fn surface_area(&self) -> f64 {
        match self {
            Self::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Self::Box { half_extents: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[2] * h[0]),
            Self::Capsule { p0, p1, radius } => 2.0 * PI * radius * norm(&sub(p1, p0)) + 4.0 * PI * radius * radius,
        }
    }

    /// Radius of a ball about the origin containing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Self::Sphere { center, radius } => norm(center) + radius,
            Self::Box { center, half_extents } => norm(center) + norm(half_extents),
            Self::Capsule { p0, p1, radius } => norm(p0).max(norm(p1)) + radius,
        }
    }

    fn fits_unit_cube(&self) -> bool {
        let inside = |c: &[f64; 3], r: &[f64; 3]| (0..3).all(|i| c[i].abs() + r[i] <= HALF_CUBE);
        match self {
            Self::Sphere { center, radius } => inside(center, &[*radius; 3]),
            Self::Box { center, half_extents } => inside(center, half_extents),
            Self::Capsule { p0, p1, radius } => inside(p0, &[*radius; 3]) && inside(p1, &[*radius; 3]),
        }
    }

    /// A point drawn uniformly by area from the primitive's surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        match self {
            Self::Sphere { center, radius } => {
                let u = unit_vector(rng);
                [center[0] + radius * u[0], center[1] + radius * u[1], center[2] + radius * u[2]]
            }
            Self::Box { center, half_extents: h } => {
                let faces = [h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]];
                let mut pick = rng.gen::<f64>() * faces.iter().sum::<f64>();
                let mut face = 5;
                for (f, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = f;
                        break;
                    }
                    pick -= a;
                }
                let axis = face / 2;
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut p = *center;
                for i in 0..3 {
                    p[i] += if i == axis { sign * h[i] } else { rng.gen_range(-h[i]..=h[i]) };
                }
                p
            }
            Self::Capsule { p0, p1, radius } => {
                let axis = sub(p1, p0);
                let len = norm(&axis);
                let side = 2.0 * PI * radius * len;
                let caps = 4.0 * PI * radius * radius;
                if rng.gen::<f64>() * (side + caps) < side {
                    let a = [axis[0] / len, axis[1] / len, axis[2] / len];
                    let (u, w) = frame(&a);
                    let t = rng.gen::<f64>();
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    let (s, c) = phi.sin_cos();
                    std::array::from_fn(|i| p0[i] + t * axis[i] + radius * (c * u[i] + s * w[i]))
                } else {
                    // The two hemispherical caps form one full sphere; each
                    // direction belongs to the cap facing away from the segment.
                    let d = unit_vector(rng);
                    let end = if len > 0.0 && dot(&d, &axis) > 0.0 { p1 } else { p0 };
                    std::array::from_fn(|i| end[i] + radius * d[i])
                }
            }
        }
    }
}

fn segment_distance(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = dot(&ab, &ab);
    let t = if len2 > 0.0 { (dot(&ap, &ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    norm(&[ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]])
}

/// A union of primitives inside `[-0.5, 0.5]^3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub primitives: Vec<ShapePrimitive>,
}

impl ShapeSpec {
    pub fn new(primitives: Vec<ShapePrimitive>) -> Result<Self, TrainingError> {
        let spec = Self { primitives };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sphere(center: [f64; 3], radius: f64) -> Result<Self, TrainingError> {
        Self::new(vec![ShapePrimitive::Sphere { center, radius }])
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.primitives.is_empty() {
            return Err(TrainingError::Shape("shape has no primitives".into()));
        }
        for p in &self.primitives {
            p.validate()?;
            if !p.fits_unit_cube() {
                return Err(TrainingError::Shape(format!("primitive {p:?} leaves the unit cube")));
            }
        }
        Ok(())
    }

    /// Exact occupancy of the union; the boundary counts as inside.
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        self.primitives.iter().any(|s| s.contains(p))
    }

    pub fn occupancy(&self, points: &[[f64; 3]]) -> Vec<f64> {
        points.iter().map(|p| if self.contains(p) { 1.0 } else { 0.0 }).collect()
    }

    pub fn bounding_radius(&self) -> f64 {
        self.primitives.iter().map(ShapePrimitive::bounding_radius).fold(0.0, f64::max)
    }

    /// Points uniform by area on the union's outer surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<[f64; 3]>, TrainingError> {
        self.validate()?;
        let areas: Vec<f64> = self.primitives.iter().map(ShapePrimitive::surface_area).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        let max_attempts = 1000 * n.max(1);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > max_attempts {
                return Err(TrainingError::Shape("union surface is almost entirely hidden".into()));
            }
            let mut pick = rng.gen::<f64>() * total;
            let mut which = areas.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    which = i;
                    break;
                }
                pick -= a;
            }
            let p = self.primitives[which].sample_surface(rng);
            let hidden = self.primitives.iter().enumerate().any(|(j, other)| j != which && other.contains_strictly(&p));
            if !hidden {
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Random shape families for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// A single sphere.
    Sphere,
    /// Unions of one to three spheres and boxes.
    SphereBox,
    /// Unions of one to three spheres, boxes and capsules.
    Mixed,
}

impl ShapeFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::SphereBox => "sphere_box",
            Self::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Self::Sphere, Self::SphereBox, Self::Mixed]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown shape family {s:?} (expected sphere, sphere_box or mixed)"))
    }
}

pub fn random_shape<R: Rng + ?Sized>(rng: &mut R, family: ShapeFamily) -> ShapeSpec {
    loop {
        let count = match family {
            ShapeFamily::Sphere => 1,
            _ => rng.gen_range(1..=3),
        };
        let primitives: Vec<ShapePrimitive> = (0..count)
            .map(|_| {
                let center: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));
                let kind = match family {
                    ShapeFamily::Sphere => 0,
                    ShapeFamily::SphereBox => rng.gen_range(0..2),
                    ShapeFamily::Mixed => rng.gen_range(0..3),
                };
                match kind {
                    0 => ShapePrimitive::Sphere { center, radius: rng.gen_range(0.12..0.3) },
                    1 => {
                        ShapePrimitive::Box { center, half_extents: std::array::from_fn(|_| rng.gen_range(0.08..0.25)) }
                    }
                    _ => {
                        let half = rng.gen_range(0.05..0.2);
                        let d = unit_vector(rng);
                        ShapePrimitive::Capsule {
                            p0: std::array::from_fn(|i| center[i] - half * d[i]),
                            p1: std::array::from_fn(|i| center[i] + half * d[i]),
                            radius: rng.gen_range(0.06..0.15),
                        }
                    }
                }
            })
            .collect();
        let spec = ShapeSpec { primitives };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

/// Samples a noisy surface cloud of `spec`.
pub fn synth_shape<R: Rng + ?Sized>(
    spec: &ShapeSpec,
    rng: &mut R,
    n_surface: usize,
    noise_sd: f64,
) -> Result<PointCloud, TrainingError> {
    if n_surface == 0 {
        return Err(TrainingError::Config("a cloud needs at least one point".into()));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(TrainingError::Config(format!("noise sd must be finite and non-negative, got {noise_sd}")));
    }
    let mut pts = spec.sample_surface(rng, n_surface)?;
    if noise_sd > 0.0 {
        for p in &mut pts {
            for c in p.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *c += noise_sd * e;
            }
        }
    }
    Ok(PointCloud::new(pts)?)
}

/// Offset scale of near-surface queries.
pub const NEAR_SURFACE_SD: f64 = 0.025;

/// Query points with exact occupancy labels: a uniform share over the unit
/// cube followed by surface points jittered by [`NEAR_SURFACE_SD`].
pub fn sample_queries<R: Rng + ?Sized>(
    spec: &ShapeSpec,
    rng: &mut R,
    n: usize,
    near_surface_fraction: f64,
) -> Result<(Vec<[f64; 3]>, Vec<f64>), TrainingError> {
    if !(0.0..=1.0).contains(&near_surface_fraction) {
        return Err(TrainingError::Config(format!(
            "near-surface fraction must lie in [0, 1], got {near_surface_fraction}"
        )));
    }
    let near = (near_surface_fraction * n as f64).round() as usize;
    let mut points: Vec<[f64; 3]> =
        (0..n - near).map(|_| std::array::from_fn(|_| rng.gen_range(-HALF_CUBE..HALF_CUBE))).collect();
    for mut p in spec.sample_surface(rng, near)? {
        for c in p.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *c += NEAR_SURFACE_SD * e;
        }
        points.push(p);
    }
    let labels = spec.occupancy(&points);
    Ok((points, labels))
}
