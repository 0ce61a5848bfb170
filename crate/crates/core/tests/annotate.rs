use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use usst::annotate::{
    depth_objective, fit_depth_model, fuse_trajectories, fusion_weight, repair_depths, DepthModel,
};

const PLANTED: [f64; 6] = [0.001, -0.01, 0.05, 0.4, 0.02, 0.7];

fn planted(n: usize) -> (Vec<f64>, DepthModel) {
    let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let model = DepthModel {
        coeffs: PLANTED,
        t0: 0.0,
        span: (n - 1) as f64,
    };
    (times, model)
}

#[test]
fn planted_curve_is_recovered() {
    let (times, truth) = planted(30);
    let z: Vec<f64> = times.iter().map(|&t| truth.eval(t)).collect();
    let fit = fit_depth_model(&times, &z, &[true; 30]).unwrap();
    for i in 0..=290 {
        let t = i as f64 / 10.0;
        assert!((fit.model.eval(t) - truth.eval(t)).abs() < 1e-3, "t = {t}");
    }
    assert!(fit.rmse < 1e-6);
}

#[test]
fn fit_is_no_worse_than_planted() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.005).unwrap();
    let (times, truth) = planted(30);
    let z: Vec<f64> = times.iter().map(|&t| truth.eval(t) + noise.sample(&mut rng)).collect();
    let valid = vec![true; 30];
    let fit = fit_depth_model(&times, &z, &valid).unwrap();
    let ours = depth_objective(&fit.model, &times, &z, &valid);
    let theirs = depth_objective(&truth, &times, &z, &valid);
    assert!(ours <= theirs + 1e-9, "{ours} > {theirs}");
}

#[test]
fn noisy_corrupted_track_is_repaired() {
    let noise = Normal::new(0.0, 0.005).unwrap();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (times, truth) = planted(30);
        let clean: Vec<f64> = times.iter().map(|&t| truth.eval(t)).collect();
        let mut z: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
        let mut valid = vec![true; 30];
        let mut dropped = 0;
        while dropped < 6 {
            let i = rng.random_range(0..30);
            if valid[i] {
                valid[i] = false;
                z[i] = 0.0;
                dropped += 1;
            }
        }
        let out = repair_depths(&z, &valid).unwrap();
        for i in 0..30 {
            if valid[i] {
                assert_eq!(out.depths[i], z[i]);
            } else {
                assert!((out.depths[i] - clean[i]).abs() < 2e-2, "seed {seed} step {i}");
            }
        }
    }
}

#[test]
fn fused_points_follow_weights() {
    let n = 25;
    let f: Vec<[f64; 2]> = (0..n).map(|i| [i as f64, 2.0 * i as f64]).collect();
    let b: Vec<[f64; 2]> = (0..n).map(|i| [100.0 - i as f64, 7.0]).collect();
    let fused = fuse_trajectories(&f, &b, 0.3).unwrap();
    for t in 0..n {
        let w = fusion_weight(t + 1, n, 0.3);
        assert!((fused[t][0] - (w * f[t][0] + (1.0 - w) * b[t][0])).abs() < 1e-12);
        assert!((fused[t][1] - (w * f[t][1] + (1.0 - w) * b[t][1])).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn fusion_weight_strictly_decreasing(horizon in 2usize..30, c in 0.0f64..0.95) {
        for t in 1..horizon {
            let (a, b) = (fusion_weight(t, horizon, c), fusion_weight(t + 1, horizon, c));
            prop_assert!(a > b);
            prop_assert!(b > c && a < 1.0);
        }
    }

    #[test]
    fn repair_keeps_valid_entries(seed in 0u64..1000, drop in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20;
        let mut z: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
        let mut valid = vec![true; n];
        for i in 0..drop {
            valid[(i * 7 + seed as usize) % n] = false;
        }
        for i in 0..n {
            if !valid[i] {
                z[i] = 0.0;
            }
        }
        let out = repair_depths(&z, &valid).unwrap();
        for i in 0..n {
            if valid[i] {
                prop_assert_eq!(out.depths[i], z[i]);
            }
        }
    }
}

#[test]
fn sample_repair_restores_dropped_points() {
    use usst::datagen::{default_scenes, gen_sample, DatasetConfig};
    let cfg = DatasetConfig {
        profile: usst::datagen::Profile::MinJerk,
        duration_min: 30,
        duration_max: 30,
        depth_noise: 0.0,
        dropout: 0.2,
        ..DatasetConfig::default()
    };
    let scenes = default_scenes(&cfg);
    let g = (0..20).map(|i| gen_sample(&cfg, &scenes, i).unwrap()).find(|g| !g.sample.is_fully_valid()).unwrap();
    let (fixed, report) = usst::annotate::repair_sample(&g.sample).unwrap();
    assert!(fixed.is_fully_valid());
    assert_eq!(report.n_repaired, g.sample.valid_depth.iter().filter(|v| !**v).count());
    for t in 0..fixed.horizon() {
        let (p, q) = (fixed.points_local[t], g.true_local[t]);
        if g.sample.valid_depth[t] {
            assert_eq!(p, g.sample.points_local[t]);
        }
        // the ray is exact, so xy scale with the depth error only
        assert!((0..3).all(|i| (p[i] - q[i]).abs() < 2e-2), "step {t}: {p:?} vs {q:?}");
        assert!((p[0] / p[2] - q[0] / q[2]).abs() < 1e-12);
    }
    let world = fixed.poses.local_to_global(fixed.points_local[5], 6).unwrap();
    assert_eq!(world, fixed.points_global[5]);
}
