use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{finite_difference_check, Tape, Var};
use crate::eqlayers::BoundParams;
use crate::geometry::{random_rotation, PointCloud, SimilarityTransform};

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-0.4..0.4))).collect()).unwrap()
}

fn random_queries(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-0.5..0.5))).collect()
}

fn small_config(mode: EquivarianceMode) -> ModelConfig {
    let mut c = ModelConfig::new(mode);
    c.k = 8;
    if mode.is_equivariant() {
        c.scalar_channels = 8;
        c.vector_channels = 4;
    } else {
        c.scalar_channels = 16;
    }
    c.decoder_width = 16;
    c.decoder_blocks = 2;
    c
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn level_sizes_follow_fractions() {
    assert_eq!(level_sizes(100, &[0.2, 0.05]), vec![100, 20, 5]);
    assert_eq!(level_sizes(1, &[0.2, 0.05]), vec![1, 1, 1]);
    assert_eq!(level_sizes(300, &[0.2, 0.05]), vec![300, 60, 15]);
}

#[test]
fn default_latent_widths() {
    assert_eq!(ModelConfig::new(EquivarianceMode::Plain).latent_width(), 192);
    assert_eq!(ModelConfig::new(EquivarianceMode::Sim).latent_width(), 120);
}

#[test]
fn only_plain_decoder_reads_the_query() {
    let plain = Model::init(small_config(EquivarianceMode::Plain), 0).unwrap();
    let so3 = Model::init(small_config(EquivarianceMode::So3), 0).unwrap();
    assert!(plain.params.contains_key("dec.fc_p.w"));
    assert!(!so3.params.contains_key("dec.fc_p.w"));
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::new(EquivarianceMode::Sim);
    c.vector_channels = 0;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::new(EquivarianceMode::Plain);
    c.fractions = vec![0.05, 0.2];
    assert!(c.validate().is_err());
    c.fractions = vec![];
    assert!(c.validate().is_ok());
}

#[test]
fn from_parts_rejects_wrong_tensors() {
    let m = Model::init(small_config(EquivarianceMode::Se3), 3).unwrap();
    assert!(Model::from_parts(m.config.clone(), m.params.clone()).is_ok());
    let mut p = m.params.clone();
    p.remove("dec.out.w");
    assert!(matches!(Model::from_parts(m.config.clone(), p), Err(ModelError::Config(_))));
}

#[test]
fn single_point_cloud_is_finite() {
    let cloud = PointCloud::new(vec![[0.1, 0.2, -0.1]]).unwrap();
    let qs = [[0.0; 3], [0.3, -0.2, 0.1]];
    for mode in EquivarianceMode::ALL {
        let m = Model::init(small_config(mode), 1).unwrap();
        let out = model_forward(&m, &cloud, &qs).unwrap();
        assert!(out.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0), "{mode}");
    }
}

#[test]
fn zero_decoder_gives_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = random_cloud(&mut rng, 40);
    for mode in EquivarianceMode::ALL {
        let mut m = Model::init(small_config(mode), 2).unwrap();
        m.zero_decoder();
        let out = model_forward(&m, &cloud, &random_queries(&mut rng, 10)).unwrap();
        assert!(out.iter().all(|&p| p == 0.5));
    }
}

#[test]
fn single_neighbor_latent_is_one_edge() {
    // With k = 1 and one point, pooling sees a single edge per level.
    let mut cfg = small_config(EquivarianceMode::Se3);
    cfg.k = 1;
    let m = Model::init(cfg.clone(), 4).unwrap();
    let cloud = PointCloud::new(vec![[0.1, 0.0, 0.0]]).unwrap();
    let mut tape = Tape::without_recording();
    let p = BoundParams::bind(&mut tape, &m.params).unwrap();
    let enc = encode_points(&mut tape, &p, &cfg, &cloud).unwrap();
    let z = aggregate_latent(&mut tape, &p, &cfg, &enc, &[[0.0, 0.2, 0.0]]).unwrap();
    assert_eq!(tape.value(z).shape(), &[1, cfg.latent_width()]);
    cfg.k = 5;
    let mut tape2 = Tape::without_recording();
    let p2 = BoundParams::bind(&mut tape2, &m.params).unwrap();
    let enc2 = encode_points(&mut tape2, &p2, &cfg, &cloud).unwrap();
    let z2 = aggregate_latent(&mut tape2, &p2, &cfg, &enc2, &[[0.0, 0.2, 0.0]]).unwrap();
    assert_eq!(tape.value(z), tape2.value(z2));
}

#[test]
fn per_query_equals_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = random_cloud(&mut rng, 60);
    let qs = random_queries(&mut rng, 17);
    for mode in EquivarianceMode::ALL {
        let m = Model::init(small_config(mode), 5).unwrap();
        let batched = model_forward(&m, &cloud, &qs).unwrap();
        let single: Vec<f64> = qs.iter().map(|q| model_forward(&m, &cloud, &[*q]).unwrap()[0]).collect();
        assert_eq!(batched, single, "{mode}");
        assert_eq!(model_forward_chunked(&m, &cloud, &qs, 4).unwrap(), batched);
    }
}

#[test]
fn tape_forward_matches_model_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cloud = random_cloud(&mut rng, 30);
    let qs = random_queries(&mut rng, 9);
    let m = Model::init(small_config(EquivarianceMode::Sim), 6).unwrap();
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &m.params).unwrap();
    let out = forward_on_tape(&mut tape, &p, &m.config, &cloud, &qs).unwrap();
    assert_eq!(tape.value(out).data(), model_forward(&m, &cloud, &qs).unwrap().as_slice());
}

fn transformed_deviation(m: &Model, cloud: &PointCloud, qs: &[[f64; 3]], t: &SimilarityTransform) -> f64 {
    let a = model_forward(m, cloud, qs).unwrap();
    let b = model_forward(m, &t.apply(cloud), &t.apply_points(qs)).unwrap();
    max_dev(&a, &b)
}

fn guaranteed(mode: EquivarianceMode, rng: &mut ChaCha8Rng) -> SimilarityTransform {
    let mut rotation = random_rotation(rng);
    if rng.gen_bool(0.5) {
        rotation[0] = rotation[0].map(|x| -x);
    }
    let (scale, translation) = match mode {
        EquivarianceMode::Plain => return SimilarityTransform::identity(),
        EquivarianceMode::So3 => (1.0, [0.0; 3]),
        EquivarianceMode::Se3 => (1.0, std::array::from_fn(|_| rng.gen_range(-1.0..1.0))),
        EquivarianceMode::Sim => (rng.gen_range(0.2..5.0), std::array::from_fn(|_| rng.gen_range(-1.0..1.0))),
    };
    SimilarityTransform::new(rotation, scale, translation).unwrap()
}

#[test]
fn mode_guarantees_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for mode in EquivarianceMode::ALL {
        let m = Model::init(small_config(mode), 7).unwrap();
        let cloud = random_cloud(&mut rng, 48);
        let qs = random_queries(&mut rng, 12);
        for _ in 0..100 {
            let t = guaranteed(mode, &mut rng);
            let dev = transformed_deviation(&m, &cloud, &qs, &t);
            assert!(dev <= 1e-10, "{mode}: deviation {dev:e}");
        }
    }
}

#[test]
fn unclaimed_transforms_change_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = random_cloud(&mut rng, 48);
    let qs = random_queries(&mut rng, 12);
    let rot = SimilarityTransform::new(random_rotation(&mut rng), 1.0, [0.0; 3]).unwrap();
    let shift = SimilarityTransform::new(crate::geometry::IDENTITY3, 1.0, [0.2, -0.1, 0.05]).unwrap();
    let grow = SimilarityTransform::new(crate::geometry::IDENTITY3, 2.0, [0.0; 3]).unwrap();
    let plain = Model::init(small_config(EquivarianceMode::Plain), 8).unwrap();
    assert!(transformed_deviation(&plain, &cloud, &qs, &rot) > 1e-6);
    assert!(transformed_deviation(&plain, &cloud, &qs, &shift) > 1e-6);
    let so3 = Model::init(small_config(EquivarianceMode::So3), 8).unwrap();
    assert!(transformed_deviation(&so3, &cloud, &qs, &shift) > 1e-6);
    let se3 = Model::init(small_config(EquivarianceMode::Se3), 8).unwrap();
    assert!(transformed_deviation(&se3, &cloud, &qs, &grow) > 1e-6);
}

#[test]
fn point_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = random_cloud(&mut rng, 50);
    let qs = random_queries(&mut rng, 10);
    // FPS starts at index 0, so that point keeps its slot.
    let mut order: Vec<usize> = (1..50).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order.insert(0, 0);
    let shuffled = cloud.select(&order).unwrap();
    for mode in EquivarianceMode::ALL {
        let m = Model::init(small_config(mode), 9).unwrap();
        let a = model_forward(&m, &cloud, &qs).unwrap();
        let b = model_forward(&m, &shuffled, &qs).unwrap();
        assert!(max_dev(&a, &b) <= 1e-10, "{mode}");
    }
}

struct GradPoint {
    cfg: ModelConfig,
    params: ParamMap,
    cloud: PointCloud,
    queries: Vec<[f64; 3]>,
    labels: Vec<f64>,
}

const FD_STEP: f64 = 1e-5;

fn grad_point(mode: EquivarianceMode, seed: u64) -> GradPoint {
    let mut cfg = ModelConfig::new(mode);
    cfg.k = 4;
    cfg.fractions = vec![0.5];
    cfg.scalar_channels = 4;
    cfg.vector_channels = if mode.is_equivariant() { 2 } else { 0 };
    cfg.decoder_width = 4;
    cfg.decoder_blocks = 1;
    let mut params = Model::init(cfg.clone(), seed).unwrap().params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.values_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    }
    let cloud = random_cloud(&mut rng, 16);
    let queries = random_queries(&mut rng, 8);
    let labels = (0..8).map(|i| (i % 2) as f64).collect();
    GradPoint { cfg, params, cloud, queries, labels }
}

impl GradPoint {
    fn loss(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var, crate::diffcore::DiffError> {
        let map: BTreeMap<String, Var> = self.params.keys().cloned().zip(vars.iter().copied()).collect();
        let p = BoundParams::from_vars(map);
        let logits = forward_logits_on_tape(tape, &p, &self.cfg, &self.cloud, &self.queries).map_err(|e| match e {
            ModelError::Layer(crate::eqlayers::LayerError::Diff(d)) => d,
            _ => crate::diffcore::DiffError::InvalidArgument("forward"),
        })?;
        let y = tape.constant(crate::diffcore::Tensor::vector(self.labels.clone()))?;
        tape.bce_logits(logits, y)
    }

    fn margin(&self) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|(k, t)| tape.param(k.clone(), t.clone()).unwrap()).collect();
        self.loss(&mut tape, &vars).unwrap();
        tape.switching_margins().min()
    }
}

/// First seed whose forward pass stays at least ten steps away from every
/// switching boundary, so central differences are meaningful.
fn screened_point(mode: EquivarianceMode) -> GradPoint {
    (0..64).map(|s| grad_point(mode, s)).find(|g| g.margin() >= 10.0 * FD_STEP).expect("a well-conditioned test point")
}

#[test]
fn logit_loss_matches_probability_loss() {
    let g = grad_point(EquivarianceMode::So3, 3);
    let mut tape = Tape::new();
    let vars: Vec<Var> = g.params.iter().map(|(k, t)| tape.param(k.clone(), t.clone()).unwrap()).collect();
    let a = g.loss(&mut tape, &vars).unwrap();
    let p = BoundParams::from_vars(g.params.keys().cloned().zip(vars.iter().copied()).collect());
    let probs = forward_on_tape(&mut tape, &p, &g.cfg, &g.cloud, &g.queries).unwrap();
    let y = tape.constant(crate::diffcore::Tensor::vector(g.labels.clone())).unwrap();
    let b = tape.bce(probs, y).unwrap();
    let (a, b) = (tape.value(a).data()[0], tape.value(b).data()[0]);
    assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
}

fn spec_gradcheck(mode: EquivarianceMode) {
    let g = screened_point(mode);
    let inputs: Vec<_> = g.params.values().cloned().collect();
    let report = finite_difference_check(|t: &mut Tape, v: &[Var]| g.loss(t, v), &inputs, FD_STEP, 1e-4)
        .unwrap_or_else(|e| panic!("{mode}: {e}"));
    assert_eq!(report.entries, g.params.values().map(|t| t.numel()).sum::<usize>());
}

#[test]
fn end_to_end_gradients_plain() {
    spec_gradcheck(EquivarianceMode::Plain);
}

#[test]
fn end_to_end_gradients_so3() {
    spec_gradcheck(EquivarianceMode::So3);
}

/// In se3 and sim every level-0 vector channel is parallel to its edge
/// displacement, so the first vector ReLU directions only pick a sign and
/// have exactly zero gradient. Their central differences see nothing but
/// rounding of the loss, so the comparison allows for that noise floor.
fn noise_aware_gradcheck(mode: EquivarianceMode) {
    let g = screened_point(mode);
    let mut tape = Tape::new();
    let vars: Vec<Var> = g.params.iter().map(|(k, t)| tape.param(k.clone(), t.clone()).unwrap()).collect();
    let l = g.loss(&mut tape, &vars).unwrap();
    let loss = tape.value(l).data()[0];
    let grads = tape.backward(l).unwrap();
    let noise = 32.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * FD_STEP);
    let eval = |params: &ParamMap| {
        let mut t = Tape::without_recording();
        let vs: Vec<Var> = params.values().map(|x| t.constant(x.clone()).unwrap()).collect();
        let out = g.loss(&mut t, &vs).unwrap();
        t.value(out).data()[0]
    };
    let mut work = g.params.clone();
    for (name, t) in &g.params {
        let analytic = grads.get(name).unwrap();
        for j in 0..t.numel() {
            let x0 = t.data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = x0 + FD_STEP;
            let fp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = x0 - FD_STEP;
            let fm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let bound = 1e-4 * a.abs().max(numeric.abs()) + noise;
            assert!((a - numeric).abs() <= bound, "{mode} {name}[{j}]: {a:e} vs {numeric:e}");
        }
    }
}

#[test]
fn end_to_end_gradients_se3() {
    noise_aware_gradcheck(EquivarianceMode::Se3);
}

#[test]
fn end_to_end_gradients_sim() {
    noise_aware_gradcheck(EquivarianceMode::Sim);
}

#[test]
fn displacement_only_vector_relu_directions_are_dead() {
    for mode in [EquivarianceMode::Se3, EquivarianceMode::Sim] {
        let g = grad_point(mode, 1);
        let mut tape = Tape::new();
        let vars: Vec<Var> = g.params.iter().map(|(k, t)| tape.param(k.clone(), t.clone()).unwrap()).collect();
        let l = g.loss(&mut tape, &vars).unwrap();
        let grads = tape.backward(l).unwrap();
        for act in ["enc.down0.act0.w_q", "enc.down0.act1.w_q"] {
            let m = grads.get(act).unwrap().data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(m < 1e-14, "{mode} {act}: {m:e}");
        }
    }
}

#[test]
fn pure_vector_channels_work() {
    let mut cfg = small_config(EquivarianceMode::Sim);
    cfg.scalar_channels = 0;
    cfg.vector_channels = 6;
    let m = Model::init(cfg, 10).unwrap();
    assert!(!m.params.keys().any(|k| k.ends_with(".w_h") || k.ends_with(".w_hv")));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cloud = random_cloud(&mut rng, 40);
    let qs = random_queries(&mut rng, 8);
    for _ in 0..20 {
        let t = guaranteed(EquivarianceMode::Sim, &mut rng);
        assert!(transformed_deviation(&m, &cloud, &qs, &t) <= 1e-10);
    }
}
