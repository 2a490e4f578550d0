use egif::recon::chamfer_l1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_mean_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut sum = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let d = (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]);
            if d < best {
                best = d;
            }
        }
        sum += best.sqrt();
    }
    sum / from.len() as f64
}

fn brute_chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    0.5 * brute_mean_nearest(a, b) + 0.5 * brute_mean_nearest(b, a)
}

/// Uniform, clustered-with-outliers or lattice-with-duplicates sets.
fn point_set(rng: &mut ChaCha8Rng, style: u64) -> Vec<[f64; 3]> {
    let n = rng.gen_range(1..=64);
    (0..n)
        .map(|_| match style {
            0 => std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            1 => {
                if rng.gen_bool(0.1) {
                    std::array::from_fn(|_| rng.gen_range(-50.0..50.0))
                } else {
                    std::array::from_fn(|_| rng.gen_range(-0.01..0.01))
                }
            }
            _ => std::array::from_fn(|_| rng.gen_range(-2i32..=2) as f64 * 0.25),
        })
        .collect()
}

#[test]
fn chamfer_matches_brute_force_on_200_instances() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = point_set(&mut rng, seed % 3);
        let b = point_set(&mut rng, (seed / 3) % 3);
        assert_eq!(chamfer_l1(&a, &b).unwrap(), brute_chamfer(&a, &b), "seed {seed}");
    }
}

#[test]
fn chamfer_matches_brute_force_on_large_surfaces() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sphere = |rng: &mut ChaCha8Rng, r: f64| -> Vec<[f64; 3]> {
        (0..3000)
            .map(|_| {
                let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
                v.map(|x| r * x / n)
            })
            .collect()
    };
    let a = sphere(&mut rng, 0.3);
    let b = sphere(&mut rng, 0.32);
    assert_eq!(chamfer_l1(&a, &b).unwrap(), brute_chamfer(&a, &b));
}
