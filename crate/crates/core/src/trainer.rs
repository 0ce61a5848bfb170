//! Normalization, batching, optimization and ADE/FDE evaluation.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use usst_numcore::{check_gradients, GradCheckConfig, GradCheckReport, Graph, NumError, Tensor};

use crate::datagen::{splitmix64, Manifest, NormStats, TrajectorySample};
use crate::error::{Error, Result};
use crate::geometry::{normalize_pixel, project, Pixel, Point3};
use crate::losses::{batch_loss, BatchTargets, LossConfig};
use crate::model::{load_archive, save_archive, Bound, CoordinateMode, ForecastOutput, ModelInput, ParamStore, Usst, UsstConfig};

/// Smallest depth used when projecting predictions that end up behind the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

pub fn normalize(p: Point3, norm: &NormStats) -> Result<Point3> {
    norm.validate()?;
    Ok(std::array::from_fn(|i| 2.0 * (p[i] - norm.min[i]) / (norm.max[i] - norm.min[i]) - 1.0))
}

pub fn denormalize(q: Point3, norm: &NormStats) -> Result<Point3> {
    norm.validate()?;
    Ok(std::array::from_fn(|i| norm.min[i] + (q[i] + 1.0) * 0.5 * (norm.max[i] - norm.min[i])))
}

/// Normalization frames for both 3D coordinate modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub global: NormStats,
    pub local: NormStats,
}

impl From<&Manifest> for Normalization {
    fn from(m: &Manifest) -> Self {
        Self {
            global: m.norm,
            local: m.norm_local,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    Fixed(f64),
    Random { lo: f64, hi: f64 },
}

impl ObservationMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ObservationMode::Fixed(r) if r > 0.0 && r < 1.0 => Ok(()),
            ObservationMode::Random { lo, hi } if lo > 0.0 && lo < hi && hi < 1.0 => Ok(()),
            other => Err(Error::Config(format!("invalid observation mode {other:?}"))),
        }
    }
}

/// `clamp(round(ratio · T), 1, T - 1)`, drawing the ratio in random mode.
pub fn observation_count<R: Rng>(horizon: usize, mode: ObservationMode, rng: &mut R) -> Result<usize> {
    if horizon < 2 {
        return Err(Error::Config(format!("horizon {horizon} leaves nothing to forecast")));
    }
    let ratio = match mode {
        ObservationMode::Fixed(r) => r,
        ObservationMode::Random { lo, hi } => rng.random_range(lo..=hi),
    };
    Ok(((ratio * horizon as f64).round() as usize).clamp(1, horizon - 1))
}

pub fn fixed_observation_count(horizon: usize, ratio: f64) -> Result<usize> {
    observation_count(horizon, ObservationMode::Fixed(ratio), &mut ChaCha8Rng::seed_from_u64(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub observation: ObservationMode,
    pub seed: u64,
    pub clip_norm: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_epochs: 10,
            epochs: 200,
            batch_size: 32,
            observation: ObservationMode::Fixed(0.6),
            seed: 0,
            clip_norm: 10.0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr, batch_size and clip_norm must be positive".into()));
        }
        self.observation.validate()?;
        self.loss.validate()
    }
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Coordinates a model of `mode` consumes for `sample`, one row per step.
pub fn model_coords(sample: &TrajectorySample, mode: CoordinateMode, norms: &Normalization) -> Result<Vec<Vec<f64>>> {
    if !sample.is_fully_valid() {
        return Err(Error::Contract(format!("sample {} has unrepaired depth; run repair first", sample.id)));
    }
    match mode {
        CoordinateMode::Global3d => sample.points_global.iter().map(|p| Ok(normalize(*p, &norms.global)?.to_vec())).collect(),
        CoordinateMode::Local3d => sample.points_local.iter().map(|p| Ok(normalize(*p, &norms.local)?.to_vec())).collect(),
        CoordinateMode::TwoD => sample
            .points_local
            .iter()
            .map(|p| {
                let uv = normalize_pixel(project(*p, &sample.intrinsics)?, &sample.intrinsics);
                Ok(vec![2.0 * uv[0] - 1.0, 2.0 * uv[1] - 1.0])
            })
            .collect(),
    }
}

/// Model-ready copy of one clip.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub horizon: usize,
    pub coords: Vec<Vec<f64>>,
    pub frames: Vec<Vec<f64>>,
}

pub fn prepare(sample: &TrajectorySample, model: &Usst, norms: &Normalization) -> Result<Prepared> {
    let coords = model_coords(sample, model.config.coordinate_mode, norms)?;
    let numel = model.config.frame.numel();
    if let Some(f) = sample.frames.iter().find(|f| f.len() != numel) {
        return Err(Error::Config(format!(
            "sample {}: frame of {} values, model expects {numel}",
            sample.id,
            f.len()
        )));
    }
    Ok(Prepared {
        horizon: sample.horizon(),
        coords,
        frames: sample.frames.clone(),
    })
}

/// Pads clips to the longest horizon and builds the model input and targets.
pub fn make_batch(items: &[&Prepared], observed: &[usize], numel: usize, cd: usize) -> (ModelInput, BatchTargets) {
    let n = items.len();
    let horizon = items.iter().map(|p| p.horizon).max().unwrap_or(0);
    let mut frames = vec![0.0; n * horizon * numel];
    let mut points = vec![0.0; n * horizon * cd];
    for (b, p) in items.iter().enumerate() {
        for s in 0..p.horizon {
            let r = b * horizon + s;
            frames[r * numel..(r + 1) * numel].copy_from_slice(&p.frames[s]);
            points[r * cd..(r + 1) * cd].copy_from_slice(&p.coords[s]);
        }
    }
    let horizons: Vec<usize> = items.iter().map(|p| p.horizon).collect();
    let input = ModelInput {
        n,
        horizon,
        horizons: horizons.clone(),
        observed: observed.to_vec(),
        frames,
        points: points.clone(),
    };
    let targets = BatchTargets {
        n,
        horizon,
        horizons,
        observed: observed.to_vec(),
        points,
        coord_dim: cd,
    };
    (input, targets)
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every non-frozen parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }

    pub fn save(&self, path: &Path, params: &ParamStore) -> Result<()> {
        let mut store = ParamStore::new();
        for (i, p) in params.params().iter().enumerate() {
            store.insert(format!("m.{}", p.name), Tensor::new(p.value.shape().to_vec(), self.m[i].clone())?, p.frozen);
            store.insert(format!("v.{}", p.name), Tensor::new(p.value.shape().to_vec(), self.v[i].clone())?, p.frozen);
        }
        save_archive(path, &store, &self.step)
    }

    pub fn load(path: &Path, params: &ParamStore) -> Result<Self> {
        let (store, step): (ParamStore, usize) = load_archive(path)?;
        let mut state = AdamState::new(params);
        state.step = step;
        for (i, p) in params.params().iter().enumerate() {
            let fetch = |prefix: &str| {
                store
                    .get(&format!("{prefix}.{}", p.name))
                    .filter(|q| q.value.shape() == p.value.shape())
                    .map(|q| q.value.data().to_vec())
                    .ok_or_else(|| Error::Config(format!("optimizer state lacks {prefix}.{}", p.name)))
            };
            state.m[i] = fetch("m")?;
            state.v[i] = fetch("v")?;
        }
        Ok(state)
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub drau: f64,
    pub velo: f64,
}

pub struct FitOutcome {
    pub curve: Vec<EpochLoss>,
    pub optimizer: AdamState,
}

/// Loss and gradients for one batch; gradients are indexed like the store.
pub fn loss_and_grads(model: &Usst, input: &ModelInput, targets: &BatchTargets, loss: &LossConfig) -> Result<([f64; 3], Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let trace = model.forward(&mut g, &bound, input)?;
    let lv = batch_loss(&mut g, &trace, targets, loss)?;
    let grads = g.backward(lv.total)?;
    let per_param = bound
        .vars
        .iter()
        .map(|v| if g.requires_grad(*v) { grads.get(*v).map(|s| s.to_vec()) } else { None })
        .collect();
    let item = |v| g.value(v).item().unwrap_or(f64::NAN);
    Ok(([item(lv.total), item(lv.drau), item(lv.velo)], per_param))
}

fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
}

/// Trains epochs `start_epoch + 1 ..= cfg.epochs`; the schedule always spans
/// `cfg.epochs`, so a resumed run continues the original one exactly.
/// `on_epoch` may stop training early after any epoch.
///
/// Batch order and random observation counts come from a generator seeded
/// by `(cfg.seed, epoch)`, so a run is reproducible and resumable.
pub fn fit(
    model: &mut Usst,
    train: &[Prepared],
    cfg: &TrainConfig,
    optimizer: Option<AdamState>,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochLoss) -> ControlFlow<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let numel = model.config.frame.numel();
    let cd = model.config.coord_dim();
    let batches = train.len().div_ceil(cfg.batch_size);
    let warmup = cfg.warmup_epochs * batches;
    if start_epoch > cfg.epochs {
        return Err(Error::Config(format!("checkpoint is at epoch {start_epoch}, past the {} configured epochs", cfg.epochs)));
    }
    let total_steps = cfg.epochs * batches;
    let mut opt = optimizer.unwrap_or_else(|| AdamState::new(&model.params));
    let mut curve = Vec::with_capacity(cfg.epochs - start_epoch);
    for epoch in start_epoch + 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(epoch as u64)));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let observed = items
                .iter()
                .map(|p| observation_count(p.horizon, cfg.observation, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (input, targets) = make_batch(&items, &observed, numel, cd);
            let (losses, mut grads) = loss_and_grads(model, &input, &targets, &cfg.loss)?;
            if !losses[0].is_finite() {
                return Err(Error::Contract(format!("non-finite loss at epoch {epoch}")));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = learning_rate(cfg.lr, opt.step, warmup, total_steps);
            opt.update(&mut model.params, &grads, lr);
            for k in 0..3 {
                sums[k] += losses[k] * chunk.len() as f64;
            }
        }
        let n = train.len() as f64;
        let row = EpochLoss {
            epoch,
            total: sums[0] / n,
            drau: sums[1] / n,
            velo: sums[2] / n,
        };
        curve.push(row);
        if on_epoch(&row).is_break() {
            break;
        }
    }
    Ok(FitOutcome { curve, optimizer: opt })
}

pub fn write_loss_curve<W: Write>(w: W, curve: &[EpochLoss], header: bool) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(header).from_writer(w);
    for row in curve {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Forecasts clips in batches; `observed[i]` is the count for `items[i]`.
pub fn forecast_batch(model: &Usst, items: &[&Prepared], observed: &[usize], batch_size: usize) -> Result<Vec<ForecastOutput>> {
    let numel = model.config.frame.numel();
    let cd = model.config.coord_dim();
    let mut out = Vec::with_capacity(items.len());
    for (chunk, obs) in items.chunks(batch_size.max(1)).zip(observed.chunks(batch_size.max(1))) {
        let (input, _) = make_batch(chunk, obs, numel, cd);
        out.extend(model.forecast(&input)?);
    }
    Ok(out)
}

pub fn forecast_sample(model: &Usst, sample: &TrajectorySample, observed: usize, norms: &Normalization) -> Result<ForecastOutput> {
    let p = prepare(sample, model, norms)?;
    Ok(forecast_batch(model, &[&p], &[observed], 1)?.remove(0))
}

/// Future predictions of one clip in evaluation units.
#[derive(Clone, Debug, PartialEq)]
pub enum Predicted {
    /// World-frame metres for steps `C+1..=T`.
    Global(Vec<Point3>),
    /// Normalized frame coordinates for steps `C+1..=T`.
    Pixel(Vec<Pixel>),
}

/// Maps model outputs back to world metres or frame units.
pub fn to_predicted(out: &ForecastOutput, sample: &TrajectorySample, observed: usize, mode: CoordinateMode, norms: &Normalization) -> Result<Predicted> {
    let future = &out.mean[observed..];
    match mode {
        CoordinateMode::Global3d => Ok(Predicted::Global(
            future
                .iter()
                .map(|q| denormalize([q[0], q[1], q[2]], &norms.global))
                .collect::<Result<_>>()?,
        )),
        CoordinateMode::Local3d => Ok(Predicted::Global(
            future
                .iter()
                .enumerate()
                .map(|(k, q)| {
                    let local = denormalize([q[0], q[1], q[2]], &norms.local)?;
                    sample.poses.local_to_global(local, observed + k + 1)
                })
                .collect::<Result<_>>()?,
        )),
        CoordinateMode::TwoD => Ok(Predicted::Pixel(
            future.iter().map(|q| [(q[0] + 1.0) * 0.5, (q[1] + 1.0) * 0.5]).collect(),
        )),
    }
}

/// `p̂_{C+k} = p_C + k (p_C - p_{C-1})` on world points.
pub fn constant_velocity_baseline(points: &[Point3], observed: usize) -> Result<Vec<Point3>> {
    if observed < 2 {
        return Err(Error::Config(format!("constant velocity needs two observed steps, got {observed}")));
    }
    if observed > points.len() {
        return Err(Error::Config(format!("observed {observed} exceeds horizon {}", points.len())));
    }
    let (a, b) = (points[observed - 2], points[observed - 1]);
    Ok((1..=points.len() - observed)
        .map(|k| std::array::from_fn(|i| b[i] + k as f64 * (b[i] - a[i])))
        .collect())
}

fn pixel_of_global(sample: &TrajectorySample, p: Point3, step: usize) -> Result<Pixel> {
    let mut local = sample.poses.global_to_local(p, step)?;
    local[2] = local[2].max(MIN_PROJECTION_DEPTH);
    Ok(normalize_pixel(project(local, &sample.intrinsics)?, &sample.intrinsics))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsRow {
    pub model: String,
    pub split: String,
    pub ratio: f64,
    pub ade3d: Option<f64>,
    pub fde3d: Option<f64>,
    pub ade2d_from3d: Option<f64>,
    pub fde2d_from3d: Option<f64>,
    pub ade2d: Option<f64>,
    pub fde2d: Option<f64>,
}

fn dist<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// ADE and FDE over the future steps, averaged over clips. Ground truth is
/// each clip's world trajectory (and its projection for frame units).
pub fn compute_metrics(samples: &[&TrajectorySample], observed: &[usize], preds: &[Predicted], model: &str, split: &str, ratio: f64) -> Result<MetricsRow> {
    if samples.len() != preds.len() || samples.len() != observed.len() {
        return Err(Error::LengthMismatch("samples, observed counts and predictions".into()));
    }
    let mut acc = [0.0f64; 6];
    let mut has_3d = false;
    let mut has_2d = false;
    for ((s, &c), pred) in samples.iter().zip(observed).zip(preds) {
        let t = s.horizon();
        let steps = t - c;
        match pred {
            Predicted::Global(pts) => {
                if pts.len() != steps {
                    return Err(Error::LengthMismatch(format!("sample {}: {} predictions for {steps} steps", s.id, pts.len())));
                }
                has_3d = true;
                let mut ade = 0.0;
                let mut ade2 = 0.0;
                let (mut fde, mut fde2) = (0.0, 0.0);
                for (k, p) in pts.iter().enumerate() {
                    let step = c + k + 1;
                    let gt = s.points_global[step - 1];
                    let e = dist(p, &gt);
                    let e2 = dist(&pixel_of_global(s, *p, step)?, &pixel_of_global(s, gt, step)?);
                    ade += e;
                    ade2 += e2;
                    (fde, fde2) = (e, e2);
                }
                acc[0] += ade / steps as f64;
                acc[1] += fde;
                acc[2] += ade2 / steps as f64;
                acc[3] += fde2;
            }
            Predicted::Pixel(pts) => {
                if pts.len() != steps {
                    return Err(Error::LengthMismatch(format!("sample {}: {} predictions for {steps} steps", s.id, pts.len())));
                }
                has_2d = true;
                let mut ade = 0.0;
                let mut fde = 0.0;
                for (k, p) in pts.iter().enumerate() {
                    let step = c + k + 1;
                    let gt = normalize_pixel(project(s.points_local[step - 1], &s.intrinsics)?, &s.intrinsics);
                    fde = dist(p, &gt);
                    ade += fde;
                }
                acc[4] += ade / steps as f64;
                acc[5] += fde;
            }
        }
    }
    if has_3d && has_2d {
        return Err(Error::Contract("mixed 3D and 2D predictions".into()));
    }
    let n = samples.len().max(1) as f64;
    let avg = |on: bool, v: f64| on.then_some(v / n);
    Ok(MetricsRow {
        model: model.into(),
        split: split.into(),
        ratio,
        ade3d: avg(has_3d, acc[0]),
        fde3d: avg(has_3d, acc[1]),
        ade2d_from3d: avg(has_3d, acc[2]),
        fde2d_from3d: avg(has_3d, acc[3]),
        ade2d: avg(has_2d, acc[4]),
        fde2d: avg(has_2d, acc[5]),
    })
}

/// Forecasts of a set of clips at one observation ratio.
pub struct RatioForecast {
    pub observed: Vec<usize>,
    pub outputs: Vec<ForecastOutput>,
    pub predicted: Vec<Predicted>,
}

/// Forecasts `samples` (already `prepared` for `model`) at `ratio`.
pub fn predict(model: &Usst, samples: &[&TrajectorySample], prepared: &[Prepared], norms: &Normalization, ratio: f64, batch_size: usize) -> Result<RatioForecast> {
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let observed = samples.iter().map(|s| fixed_observation_count(s.horizon(), ratio)).collect::<Result<Vec<_>>>()?;
    let outputs = forecast_batch(model, &refs, &observed, batch_size)?;
    let predicted = outputs
        .iter()
        .zip(samples)
        .zip(&observed)
        .map(|((o, s), &c)| to_predicted(o, s, c, model.config.coordinate_mode, norms))
        .collect::<Result<Vec<_>>>()?;
    Ok(RatioForecast { observed, outputs, predicted })
}

/// Evaluates a trained model on `samples` at each ratio.
pub fn evaluate(model: &Usst, samples: &[&TrajectorySample], norms: &Normalization, ratios: &[f64], split: &str, batch_size: usize) -> Result<Vec<MetricsRow>> {
    let prepared = samples.iter().map(|s| prepare(s, model, norms)).collect::<Result<Vec<_>>>()?;
    ratios
        .iter()
        .map(|&ratio| {
            let f = predict(model, samples, &prepared, norms, ratio, batch_size)?;
            compute_metrics(samples, &f.observed, &f.predicted, "usst", split, ratio)
        })
        .collect()
}

/// Constant-velocity rows; `pixel` selects frame-coordinate extrapolation.
pub fn evaluate_baseline(samples: &[&TrajectorySample], ratios: &[f64], split: &str, pixel: bool) -> Result<Vec<MetricsRow>> {
    ratios
        .iter()
        .map(|&ratio| {
            let mut observed = Vec::with_capacity(samples.len());
            let mut preds = Vec::with_capacity(samples.len());
            for s in samples {
                if !s.is_fully_valid() {
                    return Err(Error::Contract(format!("sample {} has unrepaired depth; run repair first", s.id)));
                }
                let c = fixed_observation_count(s.horizon(), ratio)?.max(2);
                observed.push(c);
                if pixel {
                    let uv = s
                        .points_local
                        .iter()
                        .map(|p| {
                            let q = normalize_pixel(project(*p, &s.intrinsics)?, &s.intrinsics);
                            Ok([q[0], q[1], 0.0])
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let cv = constant_velocity_baseline(&uv, c)?;
                    preds.push(Predicted::Pixel(cv.iter().map(|p| [p[0], p[1]]).collect()));
                } else {
                    preds.push(Predicted::Global(constant_velocity_baseline(&s.points_global, c)?));
                }
            }
            compute_metrics(samples, &observed, &preds, "cv", split, ratio)
        })
        .collect()
}

pub fn write_metrics<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in rows {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Random batch of `n` clips of `horizon` steps with `observed` seen steps.
pub fn synthetic_batch(cfg: &UsstConfig, n: usize, horizon: usize, observed: usize, seed: u64) -> (ModelInput, BatchTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cd = cfg.coord_dim();
    let items: Vec<Prepared> = (0..n)
        .map(|_| Prepared {
            horizon,
            coords: (0..horizon).map(|_| (0..cd).map(|_| rng.random_range(-0.9..0.9)).collect()).collect(),
            frames: (0..horizon).map(|_| (0..cfg.frame.numel()).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
        })
        .collect();
    let refs: Vec<&Prepared> = items.iter().collect();
    make_batch(&refs, &vec![observed; n], cfg.frame.numel(), cd)
}

/// Finite-difference audit of the full objective with respect to every
/// trainable parameter tensor.
pub fn model_gradcheck(model: &Usst, input: &ModelInput, targets: &BatchTargets, loss: &LossConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let trainable: Vec<usize> = (0..model.params.len()).filter(|&i| !model.params.params()[i].frozen).collect();
    let inputs: Vec<(String, Tensor)> = trainable
        .iter()
        .map(|&i| {
            let p = &model.params.params()[i];
            (p.name.clone(), p.value.clone())
        })
        .collect();
    let wrap = |e: Error| NumError::InvalidArgument {
        op: "usst loss",
        detail: e.to_string(),
    };
    let report = check_gradients(
        |g, vars| {
            let mut next = vars.iter();
            let bound = Bound {
                vars: model
                    .params
                    .params()
                    .iter()
                    .map(|p| if p.frozen { g.constant(p.value.clone()) } else { *next.next().expect("one var per trainable tensor") })
                    .collect(),
            };
            let trace = model.forward(g, &bound, input).map_err(wrap)?;
            Ok(batch_loss(g, &trace, targets, loss).map_err(wrap)?.total)
        },
        &inputs,
        cfg,
    )?;
    Ok(report)
}

/// Worst relative error per parameter group (name prefix before the first dot).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub tensors: usize,
    pub probed: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn group_report(report: &GradCheckReport) -> Vec<GroupReport> {
    let mut out: Vec<GroupReport> = Vec::new();
    for r in &report.inputs {
        let group = r.name.split('.').next().unwrap_or(&r.name).to_string();
        match out.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.tensors += 1;
                g.probed += r.probed;
                g.max_rel_err = g.max_rel_err.max(r.max_rel_err);
                g.passed &= r.passed;
            }
            None => out.push(GroupReport {
                group,
                tensors: 1,
                probed: r.probed,
                max_rel_err: r.max_rel_err,
                passed: r.passed,
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let norm = NormStats {
            min: [-1.0, 0.0, 0.2],
            max: [1.0, 2.0, 0.8],
        };
        assert_eq!(normalize([-1.0, 0.0, 0.2], &norm).unwrap(), [-1.0; 3]);
        assert_eq!(normalize([1.0, 2.0, 0.8], &norm).unwrap(), [1.0; 3]);
        let mid = normalize([0.0, 1.0, 0.5], &norm).unwrap();
        assert!(mid.iter().all(|v| v.abs() < 1e-15));
        let flat = NormStats {
            min: [0.0; 3],
            max: [1.0, 0.0, 1.0],
        };
        assert!(normalize([0.0; 3], &flat).is_err());
    }

    #[test]
    fn observation_count_examples() {
        assert_eq!(fixed_observation_count(40, 0.6).unwrap(), 24);
        assert_eq!(fixed_observation_count(2, 0.9).unwrap(), 1);
        assert_eq!(fixed_observation_count(2, 0.1).unwrap(), 1);
        assert!(fixed_observation_count(1, 0.5).is_err());
    }

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(1.0, 0, 10, 100) - 0.1).abs() < 1e-15);
        assert!((learning_rate(1.0, 9, 10, 100) - 1.0).abs() < 1e-15);
        assert!((learning_rate(1.0, 10, 10, 100) - 1.0).abs() < 1e-15);
        assert!(learning_rate(1.0, 100, 10, 100).abs() < 1e-15);
        assert!(learning_rate(1.0, 55, 10, 100) < learning_rate(1.0, 30, 10, 100));
    }

    #[test]
    fn baseline_examples() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [9.0, 9.0, 9.0], [9.0, 9.0, 9.0]];
        assert_eq!(constant_velocity_baseline(&pts, 2).unwrap(), vec![[2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let still = [[0.5, 0.1, 0.3]; 5];
        assert_eq!(constant_velocity_baseline(&still, 3).unwrap(), vec![[0.5, 0.1, 0.3]; 2]);
        assert!(constant_velocity_baseline(&still, 1).is_err());
    }
}
