use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GeometryError, PointCloud};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// `x -> scale * rotation * x + translation`.
///
/// `rotation` is any orthogonal matrix, so reflections are representable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: [f64; 3],
}

const ORTHO_TOL: f64 = 1e-10;

impl SimilarityTransform {
    pub fn new(rotation: Mat3, scale: f64, translation: [f64; 3]) -> Result<Self, GeometryError> {
        let t = Self { rotation, scale, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self { rotation: IDENTITY3, scale: 1.0, translation: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.rotation.iter().flatten().all(|x| x.is_finite())
            && self.translation.iter().all(|x| x.is_finite())
            && self.scale.is_finite();
        if !finite || !(self.scale > 0.0) {
            return Err(GeometryError::InvalidTransform("scale must be positive and all entries finite"));
        }
        let qtq = matmul3(&transpose3(&self.rotation), &self.rotation);
        let dev = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (qtq[i][j] - IDENTITY3[i][j]).abs())
            .fold(0.0, f64::max);
        if dev > ORTHO_TOL || (det3(&self.rotation).abs() - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidTransform("rotation is not orthogonal"));
        }
        Ok(())
    }

    /// `s Q x + t`.
    pub fn apply_point(&self, x: &[f64; 3]) -> [f64; 3] {
        let r = self.apply_vector(x);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// `s Q v` (no translation), the action on displacement vectors.
    pub fn apply_vector(&self, v: &[f64; 3]) -> [f64; 3] {
        let q = &self.rotation;
        let s = self.scale;
        [
            s * (q[0][0] * v[0] + q[0][1] * v[1] + q[0][2] * v[2]),
            s * (q[1][0] * v[0] + q[1][1] * v[1] + q[1][2] * v[2]),
            s * (q[2][0] * v[0] + q[2][1] * v[1] + q[2][2] * v[2]),
        ]
    }

    pub fn apply_points(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|p| self.apply_point(p)).collect()
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_trusted(self.apply_points(cloud.points()))
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &SimilarityTransform) -> SimilarityTransform {
        let t1 = self.apply_vector(&first.translation);
        SimilarityTransform {
            rotation: matmul3(&self.rotation, &first.rotation),
            scale: self.scale * first.scale,
            translation: [t1[0] + self.translation[0], t1[1] + self.translation[1], t1[2] + self.translation[2]],
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let qt = transpose3(&self.rotation);
        let inv_s = 1.0 / self.scale;
        let t = &self.translation;
        let r = [
            qt[0][0] * t[0] + qt[0][1] * t[1] + qt[0][2] * t[2],
            qt[1][0] * t[0] + qt[1][1] * t[1] + qt[1][2] * t[2],
            qt[2][0] * t[0] + qt[2][1] * t[1] + qt[2][2] * t[2],
        ];
        SimilarityTransform { rotation: qt, scale: inv_s, translation: [-inv_s * r[0], -inv_s * r[1], -inv_s * r[2]] }
    }
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose3(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Unit quaternion `(w, x, y, z)` to rotation matrix.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Uniform draw from SO(3): normalized quaternion of four standard normals.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return quaternion_to_matrix(q.map(|x| x / n));
        }
    }
}

/// Which components of a similarity transform are randomized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    Identity,
    Rotation,
    Translation,
    Scale,
    RotationTranslation,
    All,
}

impl TransformMode {
    pub fn rotates(self) -> bool {
        matches!(self, Self::Rotation | Self::RotationTranslation | Self::All)
    }

    pub fn translates(self) -> bool {
        matches!(self, Self::Translation | Self::RotationTranslation | Self::All)
    }

    pub fn scales(self) -> bool {
        matches!(self, Self::Scale | Self::All)
    }
}

/// Limits for [`random_transform`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformConstraints {
    /// Radius of a ball about the origin containing the shape. When set,
    /// the transformed ball must stay inside `[-0.5, 0.5]^3`.
    pub bounding_radius: Option<f64>,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for TransformConstraints {
    fn default() -> Self {
        Self { bounding_radius: None, min_scale: 0.2, max_scale: 1.0 }
    }
}

const HALF_CUBE: f64 = 0.5;

pub fn random_transform<R: Rng + ?Sized>(
    rng: &mut R,
    mode: TransformMode,
    constraints: &TransformConstraints,
) -> Result<SimilarityTransform, GeometryError> {
    let c = constraints;
    if !(c.min_scale > 0.0) || c.max_scale < c.min_scale {
        return Err(GeometryError::InfeasibleConstraints("scale range is empty".into()));
    }
    let radius = c.bounding_radius.unwrap_or(0.0);
    if radius < 0.0 || !radius.is_finite() {
        return Err(GeometryError::InfeasibleConstraints("bounding radius must be non-negative".into()));
    }
    let scale = if mode.scales() {
        let hi = if radius > 0.0 { c.max_scale.min(HALF_CUBE / radius) } else { c.max_scale };
        if hi < c.min_scale {
            return Err(GeometryError::InfeasibleConstraints(format!(
                "bounding radius {radius} does not fit the unit cube at scale {}",
                c.min_scale
            )));
        }
        if hi > c.min_scale {
            rng.gen_range(c.min_scale..=hi)
        } else {
            hi
        }
    } else {
        1.0
    };
    let rotation = if mode.rotates() { random_rotation(rng) } else { IDENTITY3 };
    let translation = if mode.translates() {
        let extent = HALF_CUBE - scale * radius;
        if extent < 0.0 {
            return Err(GeometryError::InfeasibleConstraints(format!(
                "no translation keeps radius {} inside the unit cube",
                scale * radius
            )));
        }
        if extent > 0.0 {
            std::array::from_fn(|_| rng.gen_range(-extent..=extent))
        } else {
            [0.0; 3]
        }
    } else {
        [0.0; 3]
    };
    Ok(SimilarityTransform { rotation, scale, translation })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn close(a: &[f64; 3], b: &[f64; 3], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_leaves_points_alone() {
        let p = [[0.1, -0.2, 0.3], [0.0, 0.0, 0.0]];
        assert_eq!(SimilarityTransform::identity().apply_points(&p), p.to_vec());
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let t = SimilarityTransform::new(q, 1.0, [0.0; 3]).unwrap();
        assert_eq!(t.apply_point(&[1.0, 0.0, 0.0]), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn scale_then_translate() {
        let t = SimilarityTransform::new(IDENTITY3, 2.0, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.apply_point(&[0.5, 0.0, 0.0]), [2.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_transforms() {
        assert!(SimilarityTransform::new(IDENTITY3, 0.0, [0.0; 3]).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(SimilarityTransform::new(skew, 1.0, [0.0; 3]).is_err());
        let reflect = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(SimilarityTransform::new(reflect, 1.0, [0.0; 3]).is_ok());
    }

    #[test]
    fn composition_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = TransformConstraints::default();
        for _ in 0..50 {
            let a = random_transform(&mut rng, TransformMode::All, &c).unwrap();
            let b = random_transform(&mut rng, TransformMode::All, &c).unwrap();
            let p = [0.3, -0.1, 0.25];
            let two_step = b.apply_point(&a.apply_point(&p));
            assert!(close(&two_step, &b.compose(&a).apply_point(&p), 1e-12));
            assert!(close(&a.inverse().apply_point(&a.apply_point(&p)), &p, 1e-12));
        }
    }

    #[test]
    fn identity_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_transform(&mut rng, TransformMode::Identity, &TransformConstraints::default()).unwrap();
        assert_eq!(t, SimilarityTransform::identity());
    }

    #[test]
    fn scale_draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = TransformConstraints::default();
        for _ in 0..1000 {
            let t = random_transform(&mut rng, TransformMode::Scale, &c).unwrap();
            assert!((0.2..=1.0).contains(&t.scale));
            assert_eq!(t.translation, [0.0; 3]);
        }
    }

    #[test]
    fn rotation_draw_is_deterministic_and_proper() {
        let c = TransformConstraints::default();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            random_transform(&mut rng, TransformMode::Rotation, &c).unwrap()
        };
        let (a, b) = (draw(), draw());
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!((det3(&a.rotation) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn translated_shapes_stay_in_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = TransformConstraints { bounding_radius: Some(0.45), ..Default::default() };
        for _ in 0..500 {
            let t = random_transform(&mut rng, TransformMode::All, &c).unwrap();
            let reach = t.scale * 0.45;
            assert!(t.translation.iter().all(|x| x.abs() + reach <= 0.5 + 1e-12));
        }
    }

    #[test]
    fn infeasible_radius_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = TransformConstraints { bounding_radius: Some(3.0), ..Default::default() };
        assert!(matches!(
            random_transform(&mut rng, TransformMode::All, &c),
            Err(GeometryError::InfeasibleConstraints(_))
        ));
    }
}
