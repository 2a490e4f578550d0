//! Equivariance audit: compares `F(T(p) | T(X))` with `F(p | X)` over random
//! transforms of each class.

use std::fmt;

use egif::geometry::{random_transform, PointCloud, SimilarityTransform, TransformConstraints, TransformMode};
use egif::implicitnet::{encode_cloud, forward_encoded, EquivarianceMode, Model, ModelError};
use egif::training::{random_shape, synth_shape, ShapeFamily, TrainingError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A family of transforms to audit against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AuditClass {
    Identity,
    /// Proper rotations about the origin.
    Rotation,
    /// Improper orthogonal maps (determinant -1).
    Reflection,
    /// Rotations and reflections, equally likely.
    Orthogonal,
    Translation,
    /// Uniform scaling about the origin.
    Scale,
    /// Orthogonal map then translation.
    Rigid,
    /// Orthogonal map, scaling and translation.
    Similarity,
}

impl AuditClass {
    pub const ALL: [AuditClass; 8] = [
        Self::Identity,
        Self::Rotation,
        Self::Reflection,
        Self::Orthogonal,
        Self::Translation,
        Self::Scale,
        Self::Rigid,
        Self::Similarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Rotation => "rotation",
            Self::Reflection => "reflection",
            Self::Orthogonal => "orthogonal",
            Self::Translation => "translation",
            Self::Scale => "scale",
            Self::Rigid => "rigid",
            Self::Similarity => "similarity",
        }
    }

    /// Whether a model of `mode` is invariant under this class by construction.
    pub fn claimed_by(self, mode: EquivarianceMode) -> bool {
        use AuditClass::*;
        match mode {
            EquivarianceMode::Plain => self == Identity,
            EquivarianceMode::So3 => matches!(self, Identity | Rotation | Reflection | Orthogonal),
            EquivarianceMode::Se3 => !matches!(self, Scale | Similarity),
            EquivarianceMode::Sim => true,
        }
    }

    /// The largest class `mode` claims; every other claimed class is a subset.
    pub fn widest(mode: EquivarianceMode) -> AuditClass {
        match mode {
            EquivarianceMode::Plain => Self::Identity,
            EquivarianceMode::So3 => Self::Orthogonal,
            EquivarianceMode::Se3 => Self::Rigid,
            EquivarianceMode::Sim => Self::Similarity,
        }
    }

    /// Draws one transform keeping a ball of `radius` about the origin inside
    /// the unit cube.
    pub fn draw(self, rng: &mut ChaCha8Rng, radius: f64) -> Result<SimilarityTransform, AuditError> {
        let (base, flip) = match self {
            Self::Identity => return Ok(SimilarityTransform::identity()),
            Self::Rotation => (TransformMode::Rotation, false),
            Self::Reflection => (TransformMode::Rotation, true),
            Self::Orthogonal => (TransformMode::Rotation, rng.gen_bool(0.5)),
            Self::Translation => (TransformMode::Translation, false),
            Self::Scale => (TransformMode::Scale, false),
            Self::Rigid => (TransformMode::RotationTranslation, rng.gen_bool(0.5)),
            Self::Similarity => (TransformMode::All, rng.gen_bool(0.5)),
        };
        let c = TransformConstraints { bounding_radius: Some(radius), ..Default::default() };
        let mut t = random_transform(rng, base, &c).map_err(|e| AuditError::Setup(e.to_string()))?;
        if flip {
            t.rotation[0] = t.rotation[0].map(|x| -x);
        }
        Ok(t)
    }
}

impl fmt::Display for AuditClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TrainingError> for AuditError {
    fn from(e: TrainingError) -> Self {
        AuditError::Setup(e.to_string())
    }
}

/// A synthetic cloud and uniform queries in the unit cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub cloud: PointCloud,
    pub queries: Vec<[f64; 3]>,
    /// Radius of a ball about the origin containing the cloud. Drawn
    /// transforms keep this ball inside the unit cube.
    pub radius: f64,
}

impl Probe {
    /// A sphere/box shape sampled with `points` noisy surface points.
    pub fn generate(seed: u64, points: usize, queries: usize) -> Result<Self, AuditError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_shape(&mut rng, ShapeFamily::SphereBox);
        let cloud = synth_shape(&spec, &mut rng, points, 0.005)?;
        let queries = (0..queries).map(|_| std::array::from_fn(|_| rng.gen_range(-0.5..0.5))).collect();
        let radius = cloud.points().iter().map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
        Ok(Self { cloud, queries, radius })
    }
}

/// One line of the audit report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub mode: EquivarianceMode,
    pub class: AuditClass,
    pub n: usize,
    pub max_abs_dev: f64,
    pub pass: bool,
}

/// The transform with the largest deviation in a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub class: AuditClass,
    pub deviation: f64,
    pub transform: SimilarityTransform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub record: AuditRecord,
    pub worst: Option<WorstCase>,
}

/// A model, the claims it is audited against and its outputs on a probe.
pub struct Auditor<'a> {
    pub model: &'a Model,
    pub mode: EquivarianceMode,
    pub probe: &'a Probe,
    pub tolerance: f64,
    base: Vec<f64>,
}

impl<'a> Auditor<'a> {
    pub fn new(model: &'a Model, mode: EquivarianceMode, probe: &'a Probe, tolerance: f64) -> Result<Self, AuditError> {
        let base = forward(model, &probe.cloud, &probe.queries)?;
        Ok(Self { model, mode, probe, tolerance, base })
    }

    /// Largest output change under `t`.
    pub fn deviation(&self, t: &SimilarityTransform) -> Result<f64, AuditError> {
        let moved = forward(self.model, &t.apply(&self.probe.cloud), &t.apply_points(&self.probe.queries))?;
        // A NaN anywhere makes the result NaN, which fails every tolerance.
        Ok(self
            .base
            .iter()
            .zip(&moved)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, |m, d| if d > m || d.is_nan() { d } else { m }))
    }

    /// Audits `n` transforms of `class` drawn from `rng`. `pass` compares the
    /// largest deviation with the tolerance whether or not the class is claimed.
    pub fn class(&self, class: AuditClass, n: usize, rng: &mut ChaCha8Rng) -> Result<ClassResult, AuditError> {
        let transforms = (0..n).map(|_| class.draw(rng, self.probe.radius)).collect::<Result<Vec<_>, _>>()?;
        let devs = transforms.par_iter().map(|t| self.deviation(t)).collect::<Result<Vec<_>, _>>()?;
        let mut worst: Option<WorstCase> = None;
        for (t, &d) in transforms.iter().zip(&devs) {
            if worst.as_ref().map_or(true, |w| d > w.deviation || (d.is_nan() && !w.deviation.is_nan())) {
                worst = Some(WorstCase { class, deviation: d, transform: *t });
            }
        }
        let max_abs_dev = worst.as_ref().map_or(0.0, |w| w.deviation);
        let record = AuditRecord { mode: self.mode, class, n, max_abs_dev, pass: max_abs_dev <= self.tolerance };
        Ok(ClassResult { record, worst })
    }

    /// Every class in order, from one transform stream seeded by `seed`.
    pub fn all(&self, n: usize, seed: u64) -> Result<Vec<ClassResult>, AuditError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        AuditClass::ALL.iter().map(|&c| self.class(c, n, &mut rng)).collect()
    }
}

fn forward(model: &Model, cloud: &PointCloud, queries: &[[f64; 3]]) -> Result<Vec<f64>, AuditError> {
    let enc = encode_cloud(model, cloud)?;
    Ok(forward_encoded(model, &enc, queries, queries.len().max(1))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use egif::geometry::det3;
    use egif::implicitnet::ModelConfig;

    fn small(mode: EquivarianceMode) -> Model {
        let mut c = ModelConfig::new(mode);
        c.k = 6;
        c.scalar_channels = 6;
        c.vector_channels = if mode.is_equivariant() { 3 } else { 0 };
        c.decoder_width = 8;
        c.decoder_blocks = 2;
        Model::init(c, 4).unwrap()
    }

    #[test]
    fn claims_nest() {
        for mode in EquivarianceMode::ALL {
            let w = AuditClass::widest(mode);
            assert!(w.claimed_by(mode));
            assert!(AuditClass::Identity.claimed_by(mode));
        }
        let count = |m| AuditClass::ALL.iter().filter(|c| c.claimed_by(m)).count();
        assert_eq!(EquivarianceMode::ALL.map(count), [1, 4, 6, 8]);
    }

    #[test]
    fn draws_match_their_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for class in AuditClass::ALL {
            let mut dets = Vec::new();
            for _ in 0..40 {
                let t = class.draw(&mut rng, 0.3).unwrap();
                t.validate().unwrap();
                let d = det3(&t.rotation);
                dets.push(d.round() as i32);
                let moves = t.translation != [0.0; 3];
                let rotates = t.rotation != egif::geometry::IDENTITY3;
                let scales = t.scale != 1.0;
                use AuditClass::*;
                assert_eq!(moves, matches!(class, Translation | Rigid | Similarity), "{class}");
                assert_eq!(rotates, !matches!(class, Identity | Translation | Scale), "{class}");
                assert_eq!(scales, matches!(class, Scale | Similarity), "{class}");
                // The probe ball stays in the cube.
                let c = t.apply_point(&[0.0; 3]);
                assert!(c.iter().all(|x| x.abs() + t.scale * 0.3 <= 0.5 + 1e-12), "{class}");
            }
            let flips = dets.iter().filter(|&&d| d == -1).count();
            match class {
                AuditClass::Reflection => assert_eq!(flips, 40),
                AuditClass::Orthogonal | AuditClass::Rigid | AuditClass::Similarity => assert!(flips > 5 && flips < 35),
                _ => assert_eq!(flips, 0),
            }
        }
    }

    #[test]
    fn identity_deviation_is_exactly_zero() {
        let probe = Probe::generate(3, 80, 20).unwrap();
        for mode in EquivarianceMode::ALL {
            let m = small(mode);
            let a = Auditor::new(&m, mode, &probe, 0.0).unwrap();
            let r = a.class(AuditClass::Identity, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(r.record.max_abs_dev, 0.0);
            assert!(r.record.pass);
        }
    }

    #[test]
    fn claimed_classes_pass_and_unclaimed_ones_are_measured() {
        let probe = Probe::generate(5, 80, 20).unwrap();
        for mode in EquivarianceMode::ALL {
            let m = small(mode);
            let results = Auditor::new(&m, mode, &probe, 1e-10).unwrap().all(10, 9).unwrap();
            for r in &results {
                let claimed = r.record.class.claimed_by(mode);
                if claimed {
                    assert!(r.record.pass, "{mode} {}: {:e}", r.record.class, r.record.max_abs_dev);
                } else {
                    assert!(r.record.max_abs_dev > 1e-6, "{mode} {}: {:e}", r.record.class, r.record.max_abs_dev);
                }
            }
        }
    }

    #[test]
    fn worst_case_replays_to_the_same_deviation() {
        let probe = Probe::generate(6, 60, 16).unwrap();
        let m = small(EquivarianceMode::So3);
        let a = Auditor::new(&m, EquivarianceMode::So3, &probe, 1e-8).unwrap();
        let r = a.class(AuditClass::Scale, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(!r.record.pass);
        let w = r.worst.unwrap();
        let json = serde_json::to_string(&w).unwrap();
        let back: WorstCase = serde_json::from_str(&json).unwrap();
        assert_eq!(a.deviation(&back.transform).unwrap(), w.deviation);
    }

    #[test]
    fn record_keys_are_stable() {
        let r =
            AuditRecord { mode: EquivarianceMode::Sim, class: AuditClass::Rigid, n: 3, max_abs_dev: 0.5, pass: false };
        let v = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["class", "max_abs_dev", "mode", "n", "pass"]);
        assert_eq!(v["class"], "rigid");
        assert_eq!(v["mode"], "sim");
    }
}
