use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, random_shape, sample_queries, synth_shape, AdamHyper, AdamState, ShapeFamily, ShapeSpec, TrainingError,
};
use crate::diffcore::{DiffError, Tape, Tensor};
use crate::eqlayers::{BoundParams, LayerError};
use crate::geometry::{random_transform, PointCloud, SimilarityTransform, TransformConstraints, TransformMode};
use crate::implicitnet::{encode_cloud, forward_encoded, forward_logits_on_tape, Model, ModelConfig, ModelError};
use crate::recon::volumetric_iou;

pub const METRICS_HEADER: &str = "step,loss,val_iou,lr,wall_ms";

/// Constant rate, then `lr * finetune_factor` from `finetune_start` (a
/// fraction of the run) onwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub lr: f64,
    pub finetune_factor: f64,
    pub finetune_start: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { lr: 1e-3, finetune_factor: 0.1, finetune_start: 2.0 / 3.0 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, iterations: usize) -> f64 {
        let switch = (self.finetune_start * iterations as f64).ceil() as usize;
        if step < switch {
            self.lr
        } else {
            self.lr * self.finetune_factor
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub iterations: usize,
    pub clouds_per_step: usize,
    pub surface_points: usize,
    pub queries_per_cloud: usize,
    pub noise_sd: f64,
    pub near_surface_fraction: f64,
    pub schedule: LrSchedule,
    pub adam: AdamHyper,
    /// Random transforms applied to each training cloud and its queries.
    pub augmentation: TransformMode,
    pub family: ShapeFamily,
    pub validation_shapes: usize,
    pub validation_queries: usize,
    pub log_every: usize,
    /// Off by default so that metrics files are reproducible.
    pub record_wall_time: bool,
}

impl TrainingConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            seed: 0,
            iterations: 3000,
            clouds_per_step: 1,
            surface_points: 300,
            queries_per_cloud: 512,
            noise_sd: 0.005,
            near_surface_fraction: 0.5,
            schedule: LrSchedule::default(),
            adam: AdamHyper::default(),
            augmentation: TransformMode::Identity,
            family: ShapeFamily::SphereBox,
            validation_shapes: 8,
            validation_queries: 2048,
            log_every: 100,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        self.model.validate()?;
        let bad = |m: String| Err(TrainingError::Config(m));
        for (name, v) in [
            ("clouds_per_step", self.clouds_per_step),
            ("surface_points", self.surface_points),
            ("queries_per_cloud", self.queries_per_cloud),
            ("validation_shapes", self.validation_shapes),
            ("validation_queries", self.validation_queries),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be finite and non-negative, got {}", self.noise_sd));
        }
        if !(0.0..=1.0).contains(&self.near_surface_fraction) {
            return bad(format!("near_surface_fraction must lie in [0, 1], got {}", self.near_surface_fraction));
        }
        let s = &self.schedule;
        if !(s.lr > 0.0 && s.lr.is_finite() && s.finetune_factor > 0.0 && (0.0..=1.0).contains(&s.finetune_start)) {
            return bad(format!("invalid learning-rate schedule {s:?}"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam hyperparameters {a:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub val_iou: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.loss, r.val_iou, r.lr, r.wall_ms)?;
    }
    w.flush()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationShape {
    pub spec: ShapeSpec,
    pub cloud: PointCloud,
    pub queries: Vec<[f64; 3]>,
    pub labels: Vec<f64>,
}

/// Held-out shapes with uniform labeled queries.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSet {
    pub shapes: Vec<ValidationShape>,
}

impl ValidationSet {
    pub fn generate(
        family: ShapeFamily,
        count: usize,
        surface_points: usize,
        noise_sd: f64,
        queries: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TrainingError> {
        let shapes = (0..count)
            .map(|_| {
                let spec = random_shape(rng, family);
                let cloud = synth_shape(&spec, rng, surface_points, noise_sd)?;
                let (queries, labels) = sample_queries(&spec, rng, queries, 0.0)?;
                Ok(ValidationShape { spec, cloud, queries, labels })
            })
            .collect::<Result<_, TrainingError>>()?;
        Ok(Self { shapes })
    }

    /// Held-out set of a configuration: its own RNG stream, disjoint from
    /// the training draws.
    pub fn for_config(config: &TrainingConfig) -> Result<Self, TrainingError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self::generate(
            config.family,
            config.validation_shapes,
            config.surface_points,
            config.noise_sd,
            config.validation_queries,
            &mut rng,
        )
    }

    /// Mean per-shape IoU of predictions thresholded at 0.5.
    pub fn iou(&self, model: &Model) -> Result<f64, TrainingError> {
        self.iou_under(model, &vec![SimilarityTransform::identity(); self.shapes.len()])
    }

    /// As [`Self::iou`] with shape `i` and its queries moved by `transforms[i]`.
    pub fn iou_under(&self, model: &Model, transforms: &[SimilarityTransform]) -> Result<f64, TrainingError> {
        if transforms.len() != self.shapes.len() {
            return Err(TrainingError::Config(format!(
                "{} transforms for {} validation shapes",
                transforms.len(),
                self.shapes.len()
            )));
        }
        let mut total = 0.0;
        for (s, t) in self.shapes.iter().zip(transforms) {
            let enc = encode_cloud(model, &t.apply(&s.cloud))?;
            let p = forward_encoded(model, &enc, &t.apply_points(&s.queries), 1024)?;
            let pred: Vec<f64> = p.iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
            total += volumetric_iou(&pred, &s.labels).map_err(|e| TrainingError::Config(e.to_string()))?;
        }
        Ok(total / self.shapes.len().max(1) as f64)
    }

    /// One random transform per shape, respecting each shape's extent.
    pub fn random_transforms(
        &self,
        mode: TransformMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SimilarityTransform>, TrainingError> {
        self.shapes
            .iter()
            .map(|s| {
                let c = TransformConstraints { bounding_radius: Some(s.spec.bounding_radius()), ..Default::default() };
                Ok(random_transform(rng, mode, &c)?)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingOutcome {
    pub model: Model,
    pub log: Vec<MetricsRow>,
    /// Loss of every step.
    pub losses: Vec<f64>,
}

impl TrainingOutcome {
    pub fn loss_trend_decreasing(&self) -> Option<bool> {
        loss_trend_decreasing(&self.losses)
    }
}

/// Whether the means of the first ten 50-step windows strictly decrease;
/// `None` for runs shorter than 500 steps.
pub fn loss_trend_decreasing(losses: &[f64]) -> Option<bool> {
    if losses.len() < 500 {
        return None;
    }
    let means: Vec<f64> = losses[..500].chunks(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    Some(means.windows(2).all(|w| w[1] < w[0]))
}

struct Sample {
    cloud: PointCloud,
    queries: Vec<[f64; 3]>,
    labels: Tensor,
}

fn draw_sample(config: &TrainingConfig, rng: &mut ChaCha8Rng) -> Result<Sample, TrainingError> {
    let spec = random_shape(rng, config.family);
    let cloud = synth_shape(&spec, rng, config.surface_points, config.noise_sd)?;
    let (queries, labels) = sample_queries(&spec, rng, config.queries_per_cloud, config.near_surface_fraction)?;
    let (cloud, queries) = if config.augmentation == TransformMode::Identity {
        (cloud, queries)
    } else {
        let c = TransformConstraints { bounding_radius: Some(spec.bounding_radius()), ..Default::default() };
        let t = random_transform(rng, config.augmentation, &c)?;
        (t.apply(&cloud), t.apply_points(&queries))
    };
    Ok(Sample { cloud, queries, labels: Tensor::vector(labels) })
}

fn loss_and_gradient(model: &Model, s: &Sample) -> Result<(f64, BTreeMap<String, Tensor>), TrainingError> {
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &model.params)?;
    let logits = forward_logits_on_tape(&mut tape, &p, &model.config, &s.cloud, &s.queries)?;
    let y = tape.constant(s.labels.clone())?;
    let loss = tape.bce_logits(logits, y)?;
    let value = tape.value(loss).item().expect("scalar loss");
    Ok((value, tape.backward(loss)?.into_map()))
}

/// Trains from a fresh initialization seeded by `config.seed`.
pub fn train(config: &TrainingConfig) -> Result<TrainingOutcome, TrainingError> {
    config.validate()?;
    let model = Model::init(config.model.clone(), config.seed)?;
    train_with(config, model, |_| {})
}

/// Trains `model` in place of a fresh one, reporting every metrics row.
///
/// Samples are drawn sequentially from one seeded stream and per-cloud
/// gradients are summed in batch order, so the result does not depend on
/// the number of threads.
pub fn train_with(
    config: &TrainingConfig,
    mut model: Model,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainingOutcome, TrainingError> {
    config.validate()?;
    if model.config != config.model {
        return Err(TrainingError::Config("model does not match the configured architecture".into()));
    }
    let validation = if config.iterations > 0 { Some(ValidationSet::for_config(config)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::default();
    let start = Instant::now();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut log = Vec::new();
    let mut window = Vec::new();
    for step in 0..config.iterations {
        let batch =
            (0..config.clouds_per_step).map(|_| draw_sample(config, &mut rng)).collect::<Result<Vec<_>, _>>()?;
        let results = batch.par_iter().map(|s| loss_and_gradient(&model, s)).collect::<Result<Vec<_>, _>>().map_err(
            |e| match e {
                TrainingError::Model(ModelError::Layer(LayerError::Diff(DiffError::NonFinite { .. }))) => {
                    TrainingError::NonFiniteLoss { step, loss: f64::NAN }
                }
                e => e,
            },
        )?;
        let n = results.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (_, g) in results {
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        if n > 1.0 {
            grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x /= n));
        }
        if !loss.is_finite() || !grads.values().all(Tensor::is_finite) {
            return Err(TrainingError::NonFiniteLoss { step, loss });
        }
        let lr = config.schedule.at(step, config.iterations);
        adam_step(&mut model.params, &grads, &mut state, &AdamHyper { lr, ..config.adam })?;
        losses.push(loss);
        window.push(loss);
        let done = step + 1;
        if done % config.log_every == 0 || done == config.iterations {
            let val_iou = validation.as_ref().map(|v| v.iou(&model)).transpose()?.unwrap_or(f64::NAN);
            let row = MetricsRow {
                step: done,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                val_iou,
                lr,
                wall_ms: if config.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
            };
            window.clear();
            on_row(&row);
            log.push(row);
        }
    }
    Ok(TrainingOutcome { model, log, losses })
}
