use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::Tensor;
use crate::eqlayers::ParamMap;
use crate::implicitnet::{EquivarianceMode, Model, ModelConfig};

/// Signed distance to a primitive, written independently of the sampler.
fn sdf(p: &[f64; 3], prim: &ShapePrimitive) -> f64 {
    let len = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    match prim {
        ShapePrimitive::Sphere { center, radius } => len(std::array::from_fn(|i| p[i] - center[i])) - radius,
        ShapePrimitive::Box { center, half_extents } => {
            let q: [f64; 3] = std::array::from_fn(|i| (p[i] - center[i]).abs() - half_extents[i]);
            let outside = len(q.map(|x| x.max(0.0)));
            outside + q[0].max(q[1]).max(q[2]).min(0.0)
        }
        ShapePrimitive::Capsule { p0, p1, radius } => {
            let ab: [f64; 3] = std::array::from_fn(|i| p1[i] - p0[i]);
            let ap: [f64; 3] = std::array::from_fn(|i| p[i] - p0[i]);
            let t = ((0..3).map(|i| ap[i] * ab[i]).sum::<f64>() / (0..3).map(|i| ab[i] * ab[i]).sum::<f64>())
                .clamp(0.0, 1.0);
            len(std::array::from_fn(|i| ap[i] - t * ab[i])) - radius
        }
    }
}

fn union_sdf(p: &[f64; 3], spec: &ShapeSpec) -> f64 {
    spec.primitives.iter().map(|s| sdf(p, s)).fold(f64::INFINITY, f64::min)
}

fn centered_sphere() -> ShapeSpec {
    ShapeSpec::sphere([0.0; 3], 0.3).unwrap()
}

#[test]
fn sphere_oracle_examples() {
    let s = centered_sphere();
    assert!(s.contains(&[0.0, 0.0, 0.0]));
    assert!(!s.contains(&[0.49, 0.0, 0.0]));
    assert!(s.contains(&[0.3, 0.0, 0.0]));
}

#[test]
fn degenerate_primitives_are_rejected() {
    assert!(ShapeSpec::sphere([0.0; 3], 0.0).is_err());
    assert!(ShapeSpec::sphere([0.0; 3], -0.1).is_err());
    assert!(ShapeSpec::new(vec![ShapePrimitive::Box { center: [0.0; 3], half_extents: [0.1, 0.0, 0.1] }]).is_err());
    assert!(ShapeSpec::new(vec![]).is_err());
    assert!(ShapeSpec::sphere([0.3, 0.0, 0.0], 0.3).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad =
        ShapeSpec { primitives: vec![ShapePrimitive::Capsule { p0: [0.0; 3], p1: [0.1, 0.0, 0.0], radius: 0.0 }] };
    assert!(synth_shape(&bad, &mut rng, 10, 0.0).is_err());
}

#[test]
fn noiseless_samples_lie_on_the_union_surface() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for family in [ShapeFamily::Sphere, ShapeFamily::SphereBox, ShapeFamily::Mixed] {
        for _ in 0..20 {
            let spec = random_shape(&mut rng, family);
            let cloud = synth_shape(&spec, &mut rng, 300, 0.0).unwrap();
            assert_eq!(cloud.len(), 300);
            for p in cloud.points() {
                let d = union_sdf(p, &spec);
                assert!(d.abs() <= 1e-9, "{family:?} {spec:?} {p:?} {d}");
            }
        }
    }
}

#[test]
fn surface_sampling_is_uniform_by_area() {
    // A box with faces of very different areas: the share of samples on
    // each face pair follows the face area.
    let spec = ShapeSpec::new(vec![ShapePrimitive::Box { center: [0.0; 3], half_extents: [0.05, 0.2, 0.4] }]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    let pts = spec.sample_surface(&mut rng, n).unwrap();
    let on_x = pts.iter().filter(|p| (p[0].abs() - 0.05).abs() < 1e-12).count() as f64 / n as f64;
    let expected = (0.2 * 0.4) / (0.05 * 0.2 + 0.2 * 0.4 + 0.4 * 0.05);
    let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((on_x - expected).abs() <= 4.0 * sigma, "{on_x} vs {expected}");
}

#[test]
fn noisy_samples_scatter_with_the_requested_spread() {
    let spec = centered_sphere();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = synth_shape(&spec, &mut rng, 20_000, 0.005).unwrap();
    let d: Vec<f64> = cloud.points().iter().map(|p| union_sdf(p, &spec)).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    assert!(mean.abs() < 2e-4, "{mean}");
    assert!((sd - 0.005).abs() < 2e-4, "{sd}");
}

#[test]
fn hidden_surface_is_never_sampled() {
    let spec = ShapeSpec::new(vec![
        ShapePrimitive::Sphere { center: [0.0; 3], radius: 0.2 },
        ShapePrimitive::Box { center: [0.1, 0.0, 0.0], half_extents: [0.15, 0.1, 0.1] },
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in spec.sample_surface(&mut rng, 2000).unwrap() {
        assert!(spec.primitives.iter().all(|s| sdf(&p, s) >= -1e-12), "{p:?}");
    }
}

fn box_volume(h: [f64; 3]) -> f64 {
    8.0 * h[0] * h[1] * h[2]
}

#[test]
fn uniform_query_labels_estimate_the_volume() {
    // Two overlapping boxes: the union volume follows from
    // inclusion-exclusion since their intersection is a box.
    let (c1, h1): ([f64; 3], [f64; 3]) = ([-0.05, 0.0, 0.0], [0.2, 0.15, 0.1]);
    let (c2, h2): ([f64; 3], [f64; 3]) = ([0.15, 0.05, 0.0], [0.1, 0.2, 0.25]);
    let overlap: [f64; 3] = std::array::from_fn(|i| {
        let lo = (c1[i] - h1[i]).max(c2[i] - h2[i]);
        let hi = (c1[i] + h1[i]).min(c2[i] + h2[i]);
        ((hi - lo) / 2.0).max(0.0)
    });
    let volume = box_volume(h1) + box_volume(h2) - box_volume(overlap);
    let spec = ShapeSpec::new(vec![
        ShapePrimitive::Box { center: c1, half_extents: h1 },
        ShapePrimitive::Box { center: c2, half_extents: h2 },
    ])
    .unwrap();
    let n = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (pts, labels) = sample_queries(&spec, &mut rng, n, 0.0).unwrap();
    assert!(pts.iter().all(|p| p.iter().all(|x| (-0.5..0.5).contains(x))));
    let mean = labels.iter().sum::<f64>() / n as f64;
    let sigma = (volume * (1.0 - volume) / n as f64).sqrt();
    assert!((mean - volume).abs() <= 3.0 * sigma, "{mean} vs {volume}");

    let sphere = centered_sphere();
    let (_, labels) = sample_queries(&sphere, &mut rng, n, 0.0).unwrap();
    let v = 4.0 / 3.0 * std::f64::consts::PI * 0.3f64.powi(3);
    let mean = labels.iter().sum::<f64>() / n as f64;
    assert!((mean - v).abs() <= 3.0 * (v * (1.0 - v) / n as f64).sqrt(), "{mean} vs {v}");
}

#[test]
fn query_sampling_edge_cases() {
    let spec = centered_sphere();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (p, l) = sample_queries(&spec, &mut rng, 0, 0.5).unwrap();
    assert!(p.is_empty() && l.is_empty());
    assert!(sample_queries(&spec, &mut rng, 10, 1.5).is_err());
    assert!(sample_queries(&spec, &mut rng, 10, -0.1).is_err());

    let a = sample_queries(&spec, &mut ChaCha8Rng::seed_from_u64(4), 64, 0.5).unwrap();
    let b = sample_queries(&spec, &mut ChaCha8Rng::seed_from_u64(4), 64, 0.5).unwrap();
    assert_eq!(a, b);

    // The near-surface half hugs the sphere.
    let (p, l) = sample_queries(&spec, &mut rng, 4000, 0.5).unwrap();
    assert_eq!(l, spec.occupancy(&p));
    let near: Vec<f64> = p[2000..].iter().map(|q| union_sdf(q, &spec).abs()).collect();
    assert!(near.iter().filter(|d| **d < 0.1).count() > 1990);
    let share = near.iter().sum::<f64>() / near.len() as f64;
    // Mean of |N(0, s^2)| is s * sqrt(2 / pi).
    let expected = NEAR_SURFACE_SD * (2.0 / std::f64::consts::PI).sqrt();
    assert!((share - expected).abs() < 0.15 * expected, "{share}");
}

#[test]
fn random_shapes_stay_in_the_unit_cube() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for family in [ShapeFamily::Sphere, ShapeFamily::SphereBox, ShapeFamily::Mixed] {
        for _ in 0..200 {
            let s = random_shape(&mut rng, family);
            assert!((1..=3).contains(&s.primitives.len()));
            s.validate().unwrap();
            let boxes = s.primitives.iter().any(|p| matches!(p, ShapePrimitive::Capsule { .. }));
            assert!(family == ShapeFamily::Mixed || !boxes);
        }
    }
    assert_eq!("sphere_box".parse::<ShapeFamily>().unwrap(), ShapeFamily::SphereBox);
    assert!("cone".parse::<ShapeFamily>().is_err());
}

#[test]
fn shape_specs_round_trip_through_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = random_shape(&mut rng, ShapeFamily::Mixed);
    let text = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<ShapeSpec>(&text).unwrap(), s);
}

#[test]
fn bce_examples() {
    assert!((bce_loss(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap() <= 1e-6);
    assert!((bce_loss(&[0.9], &[0.0]).unwrap() - 2.302585).abs() < 1e-6);
    assert!(bce_loss(&[0.5, 0.5], &[1.0]).is_err());
    // Clamped, so certainty in the wrong direction stays finite.
    let worst = bce_loss(&[0.0], &[1.0]).unwrap();
    assert!((worst - (-(1e-7f64).ln())).abs() < 1e-9);
}

/// Scalar Adam, written out from the update equations.
fn adam_reference(theta0: f64, grads: &[f64], h: &AdamHyper) -> Vec<f64> {
    let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as f64;
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        let mh = m / (1.0 - h.beta1.powf(t));
        let vh = v / (1.0 - h.beta2.powf(t));
        theta -= h.lr * mh / (vh.sqrt() + h.eps);
        out.push(theta);
    }
    out
}

fn scalar_params(x: f64) -> ParamMap {
    BTreeMap::from([("w".to_string(), Tensor::scalar(x))])
}

fn scalar_grad(g: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let h = AdamHyper::default();
    for g in [0.3, -2.0, 1e3, 0.05] {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.1, -0.4, 2.0]))]);
        let before = p["w"].data().to_vec();
        let mut s = AdamState::default();
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![g; 3]))]);
        adam_step(&mut p, &grads, &mut s, &h).unwrap();
        for (a, b) in p["w"].data().iter().zip(&before) {
            let step = (a - b).abs();
            assert!((step / h.lr - 1.0).abs() <= 1e-6, "{g}: {step}");
            assert_eq!((a - b).signum(), -g.signum());
        }
    }
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    let mut p = scalar_params(0.7);
    let mut s = AdamState::default();
    for _ in 0..100 {
        adam_step(&mut p, &scalar_grad(0.0), &mut s, &AdamHyper::default()).unwrap();
    }
    assert_eq!(p["w"].data(), &[0.7]);
    // Missing entries count as zero.
    adam_step(&mut p, &BTreeMap::new(), &mut s, &AdamHyper::default()).unwrap();
    assert_eq!(p["w"].data(), &[0.7]);
}

#[test]
fn adam_matches_the_scalar_reference() {
    let h = AdamHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let grads: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let expected = adam_reference(0.25, &grads, &h);
    let mut p = scalar_params(0.25);
    let mut s = AdamState::default();
    for (g, e) in grads.iter().zip(&expected) {
        adam_step(&mut p, &scalar_grad(*g), &mut s, &h).unwrap();
        assert!((p["w"].data()[0] - e).abs() <= 1e-12);
    }
}

#[test]
fn adam_moments_after_opposite_gradients() {
    let h = AdamHyper::default();
    let g = 0.8;
    let mut p = scalar_params(0.0);
    let mut s = AdamState::default();
    adam_step(&mut p, &scalar_grad(g), &mut s, &h).unwrap();
    adam_step(&mut p, &scalar_grad(-g), &mut s, &h).unwrap();
    // m2 = b1 (1 - b1) g - (1 - b1) g,  v2 = (b2 (1 - b2) + (1 - b2)) g^2
    let m2 = h.beta1 * (1.0 - h.beta1) * g - (1.0 - h.beta1) * g;
    let v2 = (h.beta2 * (1.0 - h.beta2) + (1.0 - h.beta2)) * g * g;
    assert!((s.m["w"][0] - m2).abs() < 1e-15);
    assert!((s.v["w"][0] - v2).abs() < 1e-15);
    assert_eq!(s.step, 2);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut p = scalar_params(0.0);
    let mut s = AdamState::default();
    let wrong = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
    assert!(adam_step(&mut p, &wrong, &mut s, &AdamHyper::default()).is_err());
    let unknown = BTreeMap::from([("q".to_string(), Tensor::scalar(1.0))]);
    assert!(adam_step(&mut p, &unknown, &mut s, &AdamHyper::default()).is_err());
}

#[test]
fn schedule_drops_for_the_last_third() {
    let s = LrSchedule::default();
    let rates: Vec<f64> = (0..9).map(|i| s.at(i, 9)).collect();
    assert_eq!(&rates[..6], &[1e-3; 6]);
    assert!(rates[6..].iter().all(|r| (r - 1e-4).abs() < 1e-18));
    assert_eq!(s.at(0, 1), 1e-3);
}

fn tiny_config(mode: EquivarianceMode) -> TrainingConfig {
    let mut m = ModelConfig::new(mode);
    m.k = 6;
    m.fractions = vec![0.25];
    if mode.is_equivariant() {
        m.scalar_channels = 4;
        m.vector_channels = 2;
    } else {
        m.scalar_channels = 8;
    }
    m.decoder_width = 8;
    m.decoder_blocks = 1;
    let mut c = TrainingConfig::new(m);
    c.iterations = 6;
    c.clouds_per_step = 2;
    c.surface_points = 40;
    c.queries_per_cloud = 32;
    c.validation_shapes = 2;
    c.validation_queries = 64;
    c.log_every = 4;
    c.seed = 21;
    c
}

#[test]
fn zero_iterations_return_the_initialization() {
    let mut c = tiny_config(EquivarianceMode::Sim);
    c.iterations = 0;
    let out = train(&c).unwrap();
    assert_eq!(out.model, Model::init(c.model.clone(), c.seed).unwrap());
    assert!(out.log.is_empty() && out.losses.is_empty());
}

#[test]
fn training_is_deterministic_and_logs_on_schedule() {
    let c = tiny_config(EquivarianceMode::So3);
    let a = train(&c).unwrap();
    let b = train(&c).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    assert_eq!(a.losses.len(), 6);
    assert_eq!(a.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![4, 6]);
    assert!(a.log.iter().all(|r| r.wall_ms == 0 && (0.0..=1.0).contains(&r.val_iou)));
    assert_eq!(a.log[1].lr, 1e-4);
    assert!(a.model != Model::init(c.model.clone(), c.seed).unwrap());
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &a.log).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn thread_count_does_not_change_the_result() {
    let c = tiny_config(EquivarianceMode::Plain);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| train(&c).unwrap());
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| train(&c).unwrap());
    assert_eq!(one.model, three.model);
}

#[test]
fn exploding_updates_abort_with_the_step() {
    let mut c = tiny_config(EquivarianceMode::Plain);
    c.schedule.lr = 1e300;
    match train(&c) {
        Err(e @ TrainingError::NonFiniteLoss { .. }) => assert!(e.to_string().contains("step")),
        other => panic!("expected an abort, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny_config(EquivarianceMode::Se3);
    let mut c = base.clone();
    c.queries_per_cloud = 0;
    assert!(train(&c).is_err());
    let mut c = base.clone();
    c.noise_sd = -1.0;
    assert!(train(&c).is_err());
    let mut c = base.clone();
    c.model.vector_channels = 0;
    assert!(train(&c).is_err());
    let mut c = base;
    c.near_surface_fraction = 2.0;
    assert!(train(&c).is_err());
}

#[test]
fn trend_check_needs_five_hundred_steps() {
    assert_eq!(loss_trend_decreasing(&[1.0; 499]), None);
    let falling: Vec<f64> = (0..500).map(|i| 1.0 / (1.0 + i as f64)).collect();
    assert_eq!(loss_trend_decreasing(&falling), Some(true));
    assert_eq!(loss_trend_decreasing(&[0.5; 600]), Some(false));
}

#[test]
fn sim_validation_iou_ignores_similarity_transforms() {
    let c = tiny_config(EquivarianceMode::Sim);
    let model = Model::init(c.model.clone(), 3).unwrap();
    let val = ValidationSet::for_config(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ts = val.random_transforms(crate::geometry::TransformMode::All, &mut rng).unwrap();
    let a = val.iou(&model).unwrap();
    let b = val.iou_under(&model, &ts).unwrap();
    assert!((a - b).abs() <= 1e-6, "{a} {b}");
}
