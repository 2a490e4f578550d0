use egif::geometry::{farthest_point_sample, knn, knn_table, random_rotation, squared_distance, SimilarityTransform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Recomputes every min-distance from scratch at each step.
fn fps_oracle(points: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&j| squared_distance(&points[i], &points[j])).fold(f64::INFINITY, f64::min);
            match best {
                Some((_, bd)) if d <= bd => {}
                _ => best = Some((i, d)),
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

fn knn_oracle(q: &[f64; 3], points: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (squared_distance(p, q), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Half the seeds use a coarse integer lattice so duplicates and exact
/// distance ties are common.
fn cloud(seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=64);
    let lattice = seed % 2 == 0;
    (0..n)
        .map(|_| {
            std::array::from_fn(|_| if lattice { rng.gen_range(-2i32..=2) as f64 } else { rng.gen_range(-1.0..1.0) })
        })
        .collect()
}

#[test]
fn fps_matches_brute_force_on_200_seeds() {
    for seed in 0..200u64 {
        let pts = cloud(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let m = rng.gen_range(1..=pts.len());
        let start = rng.gen_range(0..pts.len());
        assert_eq!(farthest_point_sample(&pts, m, start).unwrap(), fps_oracle(&pts, m, start), "seed {seed}");
    }
}

#[test]
fn knn_matches_brute_force_on_200_seeds() {
    for seed in 0..200u64 {
        let pts = cloud(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let k = rng.gen_range(1..=70);
        let queries: Vec<[f64; 3]> = (0..8)
            .map(|i| {
                if i < 4 {
                    pts[rng.gen_range(0..pts.len())]
                } else {
                    std::array::from_fn(|_| rng.gen_range(-2.0..2.0))
                }
            })
            .collect();
        let (table, k_eff) = knn_table(&queries, &pts, k).unwrap();
        assert_eq!(k_eff, k.min(pts.len()));
        for (qi, q) in queries.iter().enumerate() {
            let expected = knn_oracle(q, &pts, k);
            let g = knn(*q, &pts, k).unwrap();
            assert_eq!(g.neighbors, expected, "seed {seed}");
            assert_eq!(&table[qi * k_eff..(qi + 1) * k_eff], &expected[..], "seed {seed}");
        }
    }
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.0f64..1.0)
}

proptest! {
    #[test]
    fn displacements_ignore_joint_translation(
        pts in prop::collection::vec(point(), 1..40),
        q in point(),
        t in prop::array::uniform3(-0.25f64..0.25),
        k in 1usize..12,
    ) {
        let a = knn(q, &pts, k).unwrap();
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        let b = knn([q[0] + t[0], q[1] + t[1], q[2] + t[2]], &moved, k).unwrap();
        // Translation perturbs distances by rounding, which may reorder ties;
        // compare displacements per shared neighbor index.
        for (i, d) in b.neighbors.iter().zip(&b.displacements) {
            if let Some(j) = a.neighbors.iter().position(|x| x == i) {
                for c in 0..3 {
                    prop_assert!((d[c] - a.displacements[j][c]).abs() <= 1e-12);
                }
            }
        }
        prop_assert_eq!(a.len(), b.len());
    }

    #[test]
    fn knn_sets_survive_similarity_transforms(
        pts in prop::collection::vec(point(), 2..40),
        q in point(),
        seed in any::<u64>(),
        k in 1usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = SimilarityTransform::new(
            random_rotation(&mut rng),
            rng.gen_range(0.2..5.0),
            std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
        ).unwrap();
        let mut d: Vec<f64> = pts.iter().map(|p| squared_distance(p, &q)).collect();
        d.sort_by(f64::total_cmp);
        let kk = k.min(pts.len());
        // Only check when the k-th and (k+1)-th distances are clearly apart.
        prop_assume!(kk == pts.len() || d[kk] - d[kk - 1] > 1e-9);
        let mut a = knn(q, &pts, k).unwrap().neighbors;
        let mut b = knn(t.apply_point(&q), &t.apply_points(&pts), k).unwrap().neighbors;
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn transforms_compose(
        pts in prop::collection::vec(point(), 1..30),
        s1 in any::<u64>(),
        s2 in any::<u64>(),
    ) {
        let make = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            SimilarityTransform::new(
                random_rotation(&mut rng),
                rng.gen_range(0.2..5.0),
                std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            ).unwrap()
        };
        let (t1, t2) = (make(s1), make(s2));
        let two_steps = t2.apply_points(&t1.apply_points(&pts));
        let once = t2.compose(&t1).apply_points(&pts);
        for (a, b) in two_steps.iter().zip(&once) {
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() <= 1e-12);
            }
        }
        let back = t1.inverse().apply_points(&t1.apply_points(&pts));
        for (a, b) in back.iter().zip(&pts) {
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() <= 1e-12);
            }
        }
    }
}
