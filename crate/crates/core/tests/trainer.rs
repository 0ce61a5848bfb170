use std::ops::ControlFlow;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usst::datagen::{default_scenes, gen_dataset, Dataset, DatasetConfig, FrameShape, TrajectorySample};
use usst::model::{CoordinateMode, Usst, UsstConfig};
use usst::trainer::*;

const FRAME: FrameShape = FrameShape {
    height: 8,
    width: 8,
    channels: 1,
};

fn dataset(n: usize, duration: usize) -> Dataset {
    let cfg = DatasetConfig {
        n,
        frame_shape: FRAME,
        dropout: 0.0,
        unseen_scenes: 0,
        duration_min: duration,
        duration_max: duration,
        ..DatasetConfig::default()
    };
    gen_dataset(&cfg, &default_scenes(&cfg)).unwrap()
}

fn model_config(mode: CoordinateMode, seed: u64) -> UsstConfig {
    UsstConfig {
        t_max: 12,
        d_obs: 16,
        d_z: 8,
        blocks: 1,
        heads: 2,
        transition_heads: 2,
        frame: FRAME,
        encoder_channels: vec![3, 4],
        head_hidden: 16,
        traj_hidden: 8,
        emission_hidden: 16,
        coordinate_mode: mode,
        init_seed: seed,
        ..UsstConfig::desk()
    }
}

fn train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        warmup_epochs: 1,
        epochs,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn offset_preds(samples: &[&TrajectorySample], observed: &[usize], offset: [f64; 3]) -> Vec<Predicted> {
    samples
        .iter()
        .zip(observed)
        .map(|(s, &c)| Predicted::Global(s.points_global[c..].iter().map(|p| std::array::from_fn(|i| p[i] + offset[i])).collect()))
        .collect()
}

#[test]
fn metric_examples() {
    let ds = dataset(6, 10);
    let samples: Vec<&TrajectorySample> = ds.samples.iter().collect();
    let observed = vec![6; samples.len()];

    let exact = compute_metrics(&samples, &observed, &offset_preds(&samples, &observed, [0.0; 3]), "m", "s", 0.6).unwrap();
    for v in [exact.ade3d, exact.fde3d, exact.ade2d_from3d, exact.fde2d_from3d] {
        assert_eq!(v, Some(0.0));
    }
    assert_eq!(exact.ade2d, None);

    let off = compute_metrics(&samples, &observed, &offset_preds(&samples, &observed, [0.3, 0.0, 0.4]), "m", "s", 0.6).unwrap();
    assert!((off.ade3d.unwrap() - 0.5).abs() < 1e-12);
    assert!((off.fde3d.unwrap() - 0.5).abs() < 1e-12);

    let last = vec![9; samples.len()];
    let one = compute_metrics(&samples, &last, &offset_preds(&samples, &last, [1.0; 3]), "m", "s", 0.9).unwrap();
    assert!((one.fde3d.unwrap() - 3f64.sqrt()).abs() < 1e-12);
    assert!((one.ade3d.unwrap() - 3f64.sqrt()).abs() < 1e-12);
}

#[test]
fn predictions_behind_the_camera_still_score() {
    let ds = dataset(2, 10);
    let samples: Vec<&TrajectorySample> = ds.samples.iter().collect();
    let observed = vec![5; 2];
    let row = compute_metrics(&samples, &observed, &offset_preds(&samples, &observed, [0.0, 0.0, -5.0]), "m", "s", 0.5).unwrap();
    assert!(row.ade2d_from3d.unwrap().is_finite());
}

#[test]
fn normalization_is_metric_transparent() {
    let ds = dataset(5, 10);
    let norms = Normalization::from(&ds.manifest);
    let samples: Vec<&TrajectorySample> = ds.samples.iter().collect();
    let c = 4;
    let offset = [0.01, -0.02, 0.005];
    let mut direct = 0.0;
    let mut preds = Vec::new();
    for s in &samples {
        let mut mean = Vec::new();
        for (t, p) in s.points_global.iter().enumerate() {
            let q: [f64; 3] = std::array::from_fn(|i| p[i] + if t >= c { offset[i] } else { 0.0 });
            mean.push(normalize(q, &norms.global).unwrap().to_vec());
        }
        let out = usst::model::ForecastOutput {
            velocity: mean.clone(),
            alpha: vec![0.0; mean.len()],
            beta: Some(vec![0.0; mean.len()]),
            mean,
        };
        preds.push(to_predicted(&out, s, c, CoordinateMode::Global3d, &norms).unwrap());
        let n = (s.horizon() - c) as f64;
        direct += (offset.iter().map(|v| v * v).sum::<f64>().sqrt() * n) / n;
    }
    direct /= samples.len() as f64;
    let row = compute_metrics(&samples, &vec![c; samples.len()], &preds, "m", "s", 0.4).unwrap();
    assert!((row.ade3d.unwrap() - direct).abs() < 1e-9);
}

#[test]
fn local_predictions_are_mapped_to_the_world_frame() {
    let ds = dataset(3, 10);
    let norms = Normalization::from(&ds.manifest);
    let s = &ds.samples[1];
    let mean: Vec<Vec<f64>> = s.points_local.iter().map(|p| normalize(*p, &norms.local).unwrap().to_vec()).collect();
    let out = usst::model::ForecastOutput {
        velocity: mean.clone(),
        alpha: vec![0.0; 10],
        beta: Some(vec![0.0; 10]),
        mean,
    };
    let Predicted::Global(pts) = to_predicted(&out, s, 3, CoordinateMode::Local3d, &norms).unwrap() else {
        panic!("expected world points");
    };
    for (p, q) in pts.iter().zip(&s.points_global[3..]) {
        assert!((0..3).all(|i| (p[i] - q[i]).abs() < 1e-9));
    }
}

#[test]
fn baseline_is_exact_on_linear_motion() {
    let pts: Vec<[f64; 3]> = (0..8).map(|t| [0.1 * t as f64, 0.2, 0.5 - 0.01 * t as f64]).collect();
    let cv = constant_velocity_baseline(&pts, 3).unwrap();
    for (p, q) in cv.iter().zip(&pts[3..]) {
        assert!((0..3).all(|i| (p[i] - q[i]).abs() < 1e-12));
    }
}

#[test]
fn evaluation_is_order_invariant_and_covers_all_ratios() {
    let ds = dataset(12, 10);
    let norms = Normalization::from(&ds.manifest);
    let model = Usst::new(model_config(CoordinateMode::Local3d, 1)).unwrap();
    let fwd: Vec<&TrajectorySample> = ds.samples.iter().collect();
    let rev: Vec<&TrajectorySample> = ds.samples.iter().rev().collect();
    let ratios: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let a = evaluate(&model, &fwd, &norms, &ratios, "test", 5).unwrap();
    let b = evaluate(&model, &rev, &norms, &ratios, "test", 3).unwrap();
    assert_eq!(a.len(), 9);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.ratio, y.ratio);
        for (u, v) in [(x.ade3d, y.ade3d), (x.fde3d, y.fde3d), (x.ade2d_from3d, y.ade2d_from3d)] {
            assert!((u.unwrap() - v.unwrap()).abs() < 1e-12);
        }
    }
    let cv = evaluate_baseline(&fwd, &ratios, "test", false).unwrap();
    assert!(cv.iter().all(|r| r.model == "cv" && r.ade3d.unwrap() >= 0.0));
}

#[test]
fn two_d_models_report_frame_metrics() {
    let ds = dataset(6, 10);
    let norms = Normalization::from(&ds.manifest);
    let model = Usst::new(model_config(CoordinateMode::TwoD, 2)).unwrap();
    let samples: Vec<&TrajectorySample> = ds.samples.iter().collect();
    let rows = evaluate(&model, &samples, &norms, &[0.5], "test", 4).unwrap();
    assert!(rows[0].ade2d.unwrap() >= 0.0 && rows[0].ade3d.is_none());
    let cv = evaluate_baseline(&samples, &[0.5], "test", true).unwrap();
    assert!(cv[0].ade2d.unwrap() >= 0.0);
}

#[test]
fn fit_learns_freezes_and_repeats() {
    let ds = dataset(32, 10);
    let norms = Normalization::from(&ds.manifest);
    let mut drops = Vec::new();
    for seed in 0..3 {
        let mut model = Usst::new(model_config(CoordinateMode::Local3d, seed)).unwrap();
        let frozen: Vec<_> = model.params.params().iter().filter(|p| p.frozen).map(|p| p.value.clone()).collect();
        let train: Vec<Prepared> = ds.samples.iter().map(|s| prepare(s, &model, &norms).unwrap()).collect();
        let mut twin = model.clone();
        let out = fit(&mut model, &train, &train_config(8, seed), None, 0, |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(out.curve.len(), 8);
        drops.push(out.curve.last().unwrap().total - out.curve[0].total);
        let after: Vec<_> = model.params.params().iter().filter(|p| p.frozen).map(|p| p.value.clone()).collect();
        assert_eq!(frozen, after);
        if seed == 0 {
            let again = fit(&mut twin, &train, &train_config(8, seed), None, 0, |_| ControlFlow::Continue(())).unwrap();
            assert_eq!(again.curve, out.curve);
            assert_eq!(twin, model);
        }
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] < 0.0, "median loss change {drops:?}");
}

#[test]
fn resumed_training_matches_one_run() {
    let ds = dataset(16, 8);
    let norms = Normalization::from(&ds.manifest);
    let mut whole = Usst::new(model_config(CoordinateMode::Global3d, 4)).unwrap();
    let train: Vec<Prepared> = ds.samples.iter().map(|s| prepare(s, &whole, &norms).unwrap()).collect();
    let mut split = whole.clone();
    let mut cfg = train_config(4, 9);
    cfg.observation = ObservationMode::Random { lo: 0.1, hi: 0.9 };
    let full = fit(&mut whole, &train, &cfg, None, 0, |_| ControlFlow::Continue(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    // stop after two of the four scheduled epochs
    let first = fit(&mut split, &train, &cfg, None, 0, |e| if e.epoch == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }).unwrap();

    split.save(&dir.path().join("model"), 2).unwrap();
    first.optimizer.save(&dir.path().join("adam"), &split.params).unwrap();
    let (mut resumed, epoch) = Usst::load(&dir.path().join("model")).unwrap();
    let opt = AdamState::load(&dir.path().join("adam"), &resumed.params).unwrap();
    assert_eq!(opt, first.optimizer);
    let second = fit(&mut resumed, &train, &cfg, Some(opt), epoch, |_| ControlFlow::Continue(())).unwrap();
    assert_eq!(second.curve.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![3, 4]);
    assert_eq!(first.curve.iter().chain(&second.curve).copied().collect::<Vec<_>>(), full.curve);
    assert_eq!(resumed, whole);
}

#[test]
fn loss_curve_csv_columns() {
    let curve = [EpochLoss {
        epoch: 1,
        total: 0.5,
        drau: 0.25,
        velo: 0.125,
    }];
    let mut buf = Vec::new();
    write_loss_curve(&mut buf, &curve, true).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "epoch,total,drau,velo\n1,0.5,0.25,0.125\n");
}

#[test]
fn observation_count_examples() {
    assert_eq!(fixed_observation_count(40, 0.6).unwrap(), 24);
    for r in [0.01, 0.5, 0.99] {
        assert_eq!(fixed_observation_count(2, r).unwrap(), 1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let c = observation_count(10, ObservationMode::Random { lo: 0.1, hi: 0.9 }, &mut rng).unwrap();
        assert!((1..=9).contains(&c));
    }
    assert!(fixed_observation_count(1, 0.5).is_err());
}

proptest! {
    #[test]
    fn observation_count_leaves_a_future(t in 2usize..200, r in 0.001f64..0.999, seed in any::<u64>()) {
        let c = fixed_observation_count(t, r).unwrap();
        prop_assert!(c >= 1 && c < t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = observation_count(t, ObservationMode::Random { lo: r.min(0.5), hi: 0.999 }, &mut rng).unwrap();
        prop_assert!(c >= 1 && c < t);
    }

    #[test]
    fn normalize_round_trips(p in prop::array::uniform3(-5.0f64..5.0)) {
        let norm = usst::datagen::NormStats { min: [-5.0, -1.0, 0.1], max: [5.0, 3.0, 2.0] };
        let q = denormalize(normalize(p, &norm).unwrap(), &norm).unwrap();
        prop_assert!((0..3).all(|i| (p[i] - q[i]).abs() < 1e-12));
    }
}
