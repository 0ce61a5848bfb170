use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::Serialize;
use usst::annotate::{repair_sample, MIN_VALID_DEPTHS};
use usst::datagen::{default_scenes, gen_dataset, read_dataset, write_dataset, Dataset, TrajectorySample};
use usst::geometry::{normalize_pixel, project};
use usst::model::{CoordinateMode, Usst, UsstConfig};
use usst::trainer::{
    evaluate_baseline, fit, group_report, model_gradcheck, predict, prepare, synthetic_batch, write_loss_curve,
    write_metrics, AdamState, MetricsRow, Normalization, ObservationMode, Predicted, Prepared,
};
use usst_numcore::GradCheckConfig;

use crate::config::{parse_ratios, RunConfig};
use crate::error::{usage, CliError};
use crate::{Baseline, EvalArgs, ForecastArgs, GenArgs, GradcheckArgs, Preset, RepairArgs, TrainArgs};

const MODEL_FILE: &str = "model";
const OPTIMIZER_FILE: &str = "optimizer";
const LOSS_CURVE_FILE: &str = "loss_curve.csv";
const METRICS_FILE: &str = "metrics.csv";
const REPORT_FILE: &str = "repair_report.csv";
const RUN_CONFIG_FILE: &str = "run_config.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Usage(format!("cannot write {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    read_dataset(dir).map_err(usage(format!("dataset {}", dir.display())))
}

fn load_model(path: &Path) -> Result<(Usst, usize), CliError> {
    Usst::load(path).map_err(usage(format!("checkpoint {}", path.display())))
}

fn split_samples<'a>(ds: &'a Dataset, name: &str) -> Result<Vec<&'a TrajectorySample>, CliError> {
    let s = &ds.manifest.splits;
    let ids = match name {
        "train" => &s.train,
        "val" => &s.val,
        "test_seen" => &s.test_seen,
        "test_unseen" => &s.test_unseen,
        other => return Err(CliError::Usage(format!("unknown split `{other}` (train, val, test_seen, test_unseen)"))),
    };
    Ok(ds.split(ids)?)
}

fn prepare_all(samples: &[&TrajectorySample], model: &Usst, norms: &Normalization) -> Result<Vec<Prepared>, CliError> {
    samples
        .iter()
        .map(|s| prepare(s, model, norms).map_err(usage("dataset")))
        .collect()
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = a.n {
        cfg.dataset.n = n;
    }
    let out = cfg.output_dir(a.common.out, "data");
    let ds = gen_dataset(&cfg.dataset, &default_scenes(&cfg.dataset))?;
    write_dataset(&out, &ds).map_err(usage(format!("cannot write dataset to {}", out.display())))?;
    println!("wrote {} samples to {}", ds.samples.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportRow<'a> {
    track_id: &'a str,
    n_valid: usize,
    n_repaired: usize,
    rmse: String,
}

pub fn repair(a: RepairArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let data = cfg.data_dir(a.data)?;
    let out = cfg.output_dir(a.common.out, "repaired");
    let ds = load_dataset(&data)?;
    let mut rows = Vec::with_capacity(ds.samples.len());
    let mut kept = Vec::with_capacity(ds.samples.len());
    let mut skipped = Vec::new();
    for s in &ds.samples {
        let n_valid = s.valid_depth.iter().filter(|v| **v).count();
        match repair_sample(s) {
            Ok((fixed, rep)) => {
                rows.push(ReportRow {
                    track_id: &s.id,
                    n_valid,
                    n_repaired: rep.n_repaired,
                    rmse: rep.fit.map(|f| f.rmse.to_string()).unwrap_or_default(),
                });
                kept.push(fixed);
            }
            Err(e @ (usst::Error::InsufficientData { .. } | usst::Error::BehindCamera(_))) => {
                eprintln!("warning: skipping track {}: {e}", s.id);
                rows.push(ReportRow {
                    track_id: &s.id,
                    n_valid,
                    n_repaired: 0,
                    rmse: "skipped".into(),
                });
                skipped.push(s.id.clone());
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut manifest = ds.manifest.clone();
    manifest.n = kept.len();
    for list in [
        &mut manifest.splits.train,
        &mut manifest.splits.val,
        &mut manifest.splits.test_seen,
        &mut manifest.splits.test_unseen,
    ] {
        list.retain(|id| !skipped.contains(id));
    }
    let repaired = Dataset { samples: kept, manifest };
    write_dataset(&out, &repaired).map_err(usage(format!("cannot write dataset to {}", out.display())))?;
    let report = a.report.unwrap_or_else(|| out.join(REPORT_FILE));
    let file = File::create(&report).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", report.display())))?;
    let mut w = csv::Writer::from_writer(file);
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    let n_repaired: usize = rows.iter().map(|r| r.n_repaired).sum();
    println!(
        "repaired {n_repaired} depths in {} tracks; {} warning(s): tracks with fewer than {MIN_VALID_DEPTHS} valid depths skipped",
        repaired.samples.len(),
        skipped.len()
    );
    Ok(())
}

fn parse_observation(s: &str) -> Result<ObservationMode, CliError> {
    let bad = || CliError::Usage(format!("bad --observation `{s}`; use fixed:RATIO or random:LO:HI"));
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
    let mode = match parts.as_slice() {
        ["fixed", r] => ObservationMode::Fixed(num(r)?),
        ["random", lo, hi] => ObservationMode::Random { lo: num(lo)?, hi: num(hi)? },
        _ => return Err(bad()),
    };
    mode.validate()?;
    Ok(mode)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.set_seed(seed);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(o) = &a.observation {
        cfg.train.observation = parse_observation(o)?;
    }
    cfg.train.validate()?;
    let data = cfg.data_dir(a.data.clone())?;
    let out = cfg.output_dir(a.common.out, "run");
    let ds = load_dataset(&data)?;
    let norms = Normalization::from(&ds.manifest);

    let (mut model, start, optimizer) = if a.resume {
        let (model, epoch) = load_model(&out.join(MODEL_FILE))?;
        let opt = AdamState::load(&out.join(OPTIMIZER_FILE), &model.params).map_err(usage("optimizer state"))?;
        (model, epoch, Some(opt))
    } else {
        (Usst::new(cfg.model.clone())?, 0, None)
    };
    if model.config.frame != ds.manifest.frame_shape {
        return Err(CliError::Usage(format!(
            "model expects {:?} frames but the dataset has {:?}",
            model.config.frame, ds.manifest.frame_shape
        )));
    }
    if start >= cfg.train.epochs {
        println!("checkpoint is already at epoch {start} of {}", cfg.train.epochs);
        return Ok(());
    }
    let train = prepare_all(&split_samples(&ds, "train")?, &model, &norms)?;
    create_dir(&out)?;
    cfg.model = model.config.clone();
    cfg.data_dir = Some(data);
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;

    let outcome = fit(&mut model, &train, &cfg.train, optimizer, start, |e| {
        eprintln!("epoch {:>4}  total {:.6}  drau {:.6}  velo {:.6}", e.epoch, e.total, e.drau, e.velo);
        ControlFlow::Continue(())
    })?;
    let epoch = outcome.curve.last().map_or(start, |e| e.epoch);
    model.save(&out.join(MODEL_FILE), epoch).map_err(usage("cannot write checkpoint"))?;
    outcome.optimizer.save(&out.join(OPTIMIZER_FILE), &model.params).map_err(usage("cannot write optimizer state"))?;

    let curve_path = out.join(LOSS_CURVE_FILE);
    let append = a.resume && curve_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&curve_path)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", curve_path.display())))?;
    write_loss_curve(file, &outcome.curve, !append)?;
    println!("trained epochs {}..={epoch}; checkpoint in {}", start + 1, out.display());
    Ok(())
}

#[derive(Serialize)]
struct Trajectory {
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<String>,
    id: String,
    ratio: f64,
    observed_count: usize,
    /// `world` (metres) or `pixel` (normalized frame units).
    frame: &'static str,
    observed: Vec<Vec<f64>>,
    ground_truth: Vec<Vec<f64>>,
    predicted: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<f64>>,
}

fn trajectory(
    split: Option<&str>,
    s: &TrajectorySample,
    ratio: f64,
    c: usize,
    pred: &Predicted,
    out: Option<&usst::model::ForecastOutput>,
) -> Result<Trajectory, CliError> {
    let (frame, truth, predicted): (_, Vec<Vec<f64>>, Vec<Vec<f64>>) = match pred {
        Predicted::Global(p) => ("world", s.points_global.iter().map(|q| q.to_vec()).collect(), p.iter().map(|q| q.to_vec()).collect()),
        Predicted::Pixel(p) => (
            "pixel",
            s.points_local
                .iter()
                .map(|q| Ok(normalize_pixel(project(*q, &s.intrinsics)?, &s.intrinsics).to_vec()))
                .collect::<usst::Result<_>>()?,
            p.iter().map(|q| q.to_vec()).collect(),
        ),
    };
    Ok(Trajectory {
        split: split.map(String::from),
        id: s.id.clone(),
        ratio,
        observed_count: c,
        frame,
        observed: truth[..c].to_vec(),
        ground_truth: truth[c..].to_vec(),
        predicted,
        alpha: out.map(|o| o.alpha[c..].to_vec()),
        beta: out.and_then(|o| o.beta.as_ref().map(|b| b[c..].to_vec())),
    })
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let ratios = parse_ratios(&a.ratios).map_err(|e| CliError::Usage(format!("--ratios: {e}")))?;
    let data = cfg.data_dir(a.data)?;
    let out = cfg.output_dir(a.common.out, "run");
    let checkpoint = a.checkpoint.unwrap_or_else(|| out.join(MODEL_FILE));
    let (model, _) = load_model(&checkpoint)?;
    let ds = load_dataset(&data)?;
    let norms = Normalization::from(&ds.manifest);
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut dump = Vec::new();
    for split in a.split.split(',').map(str::trim) {
        let samples = split_samples(&ds, split)?;
        if samples.is_empty() {
            eprintln!("warning: split {split} is empty");
            continue;
        }
        let prepared = prepare_all(&samples, &model, &norms)?;
        for &ratio in &ratios {
            let f = predict(&model, &samples, &prepared, &norms, ratio, a.batch_size)?;
            rows.push(usst::trainer::compute_metrics(&samples, &f.observed, &f.predicted, "usst", split, ratio)?);
            if a.dump.is_some() {
                for (i, s) in samples.iter().enumerate() {
                    dump.push(trajectory(Some(split), s, ratio, f.observed[i], &f.predicted[i], None)?);
                }
            }
        }
        if let Some(Baseline::Cv) = a.baseline {
            let pixel = model.config.coordinate_mode == CoordinateMode::TwoD;
            rows.extend(evaluate_baseline(&samples, &ratios, split, pixel).map_err(usage("baseline"))?);
        }
    }
    create_dir(&out)?;
    let path = out.join(METRICS_FILE);
    let file = File::create(&path).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    write_metrics(file, &rows)?;
    if let Some(d) = &a.dump {
        write_json(d, &dump)?;
    }
    for r in &rows {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
        println!(
            "{:<5} {:<12} ratio {:.2}  ade3d {}  fde3d {}  ade2d(3d) {}  ade2d {}",
            r.model,
            r.split,
            r.ratio,
            show(r.ade3d),
            show(r.fde3d),
            show(r.ade2d_from3d),
            show(r.ade2d)
        );
    }
    Ok(())
}

pub fn forecast(a: ForecastArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let data = cfg.data_dir(a.data)?;
    let checkpoint = a.checkpoint.unwrap_or_else(|| cfg.output_dir(a.common.out.clone(), "run").join(MODEL_FILE));
    let (model, _) = load_model(&checkpoint)?;
    let ds = load_dataset(&data)?;
    let norms = Normalization::from(&ds.manifest);
    let samples: Vec<&TrajectorySample> = if a.ids.is_empty() {
        split_samples(&ds, "test_seen")?
    } else {
        a.ids
            .iter()
            .map(|id| ds.get(id).ok_or_else(|| CliError::Usage(format!("no clip with id {id}"))))
            .collect::<Result<_, _>>()?
    };
    if !(a.ratio > 0.0 && a.ratio < 1.0) {
        return Err(CliError::Usage(format!("--ratio {} outside (0, 1)", a.ratio)));
    }
    let prepared = prepare_all(&samples, &model, &norms)?;
    let f = predict(&model, &samples, &prepared, &norms, a.ratio, 64)?;
    let trajs = samples
        .iter()
        .enumerate()
        .map(|(i, s)| trajectory(None, s, a.ratio, f.observed[i], &f.predicted[i], Some(&f.outputs[i])))
        .collect::<Result<Vec<_>, CliError>>()?;
    let text = serde_json::to_string_pretty(&trajs).map_err(|e| CliError::Runtime(e.to_string()))?;
    match a.common.out {
        Some(dir) => {
            create_dir(&dir)?;
            let path: PathBuf = dir.join("forecast.json");
            std::fs::write(&path, text + "\n").map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let model_cfg = match &a.config {
        Some(path) => RunConfig::load(Some(path))?.model,
        None => match a.preset {
            Preset::Tiny => UsstConfig::tiny(),
            Preset::Desk => UsstConfig::desk(),
            Preset::Full => UsstConfig::full(),
        },
    };
    if a.observed == 0 || a.observed >= a.horizon || a.horizon > model_cfg.t_max || a.batch == 0 {
        return Err(CliError::Usage(format!(
            "need 0 < observed < horizon <= t_max ({}) and a nonempty batch",
            model_cfg.t_max
        )));
    }
    let loss = RunConfig::load(a.config.as_deref())?.train.loss;
    let model = Usst::new(UsstConfig { init_seed: a.seed, ..model_cfg })?;
    let (input, targets) = synthetic_batch(&model.config, a.batch, a.horizon, a.observed, a.seed);
    let gc = GradCheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        max_probes_per_input: a.max_probes,
    };
    let report = model_gradcheck(&model, &input, &targets, &loss, &gc).map_err(usage("gradcheck"))?;
    println!("{:<12} {:>7} {:>7} {:>12}  status", "group", "tensors", "probed", "max_rel_err");
    for g in group_report(&report) {
        println!(
            "{:<12} {:>7} {:>7} {:>12.3e}  {}",
            g.group,
            g.tensors,
            g.probed,
            g.max_rel_err,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    println!("max rel err {:.3e} at tolerance {:e}", report.max_rel_err(), a.tolerance);
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradcheck failed at tolerance {:e}", a.tolerance)))
    }
}
