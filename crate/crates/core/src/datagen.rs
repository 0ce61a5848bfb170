//! Synthetic egocentric reach clips and the JSONL dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_pixel, project, CameraIntrinsics, Point3, Pose, PoseChain};

/// Frame values are rounded to this step before storage.
pub const FRAME_QUANTUM: f64 = 1e-4;

/// Fewest valid depths kept per clip so that repair stays possible.
pub const MIN_KEPT_DEPTHS: usize = 10;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed: `splitmix64(master ^ splitmix64(index))`.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    MinJerk,
    Linear,
}

impl Profile {
    pub fn phase(self, tau: f64) -> f64 {
        match self {
            Profile::MinJerk => tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau),
            Profile::Linear => tau,
        }
    }
}

fn profile_points(s0: Point3, s1: Point3, steps: usize, profile: Profile) -> Result<Vec<Point3>> {
    if steps < 2 {
        return Err(Error::Config(format!("a reach needs at least 2 steps, got {steps}")));
    }
    Ok((0..steps)
        .map(|i| {
            let s = profile.phase(i as f64 / (steps - 1) as f64);
            [
                s0[0] + (s1[0] - s0[0]) * s,
                s0[1] + (s1[1] - s0[1]) * s,
                s0[2] + (s1[2] - s0[2]) * s,
            ]
        })
        .collect())
}

/// Minimum-jerk reach from `s0` to `s1` sampled at `steps` points.
pub fn min_jerk(s0: Point3, s1: Point3, steps: usize) -> Result<Vec<Point3>> {
    profile_points(s0, s1, steps, Profile::MinJerk)
}

/// Template for one scene; samples jitter its endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub tag: String,
    /// Mean start and target in first-frame camera coordinates (m).
    pub start: Point3,
    pub target: Point3,
    /// Uniform jitter half-width applied per axis to both endpoints (m).
    pub spread: f64,
    pub duration_min: usize,
    pub duration_max: usize,
    /// Per-step camera drift: rotation (rad) and translation (m).
    pub rotation_drift: f64,
    pub translation_drift: f64,
    /// Background noise standard deviation of the frames.
    pub pixel_noise: f64,
    /// Standard deviation of the measured depth (m).
    pub depth_noise: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration_min < 2 || self.duration_min > self.duration_max {
            return Err(Error::Config(format!(
                "scene {}: duration range {}..={} invalid",
                self.tag, self.duration_min, self.duration_max
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("scene {}: dropout {} outside [0, 1]", self.tag, self.dropout)));
        }
        let amounts = [
            self.spread,
            self.rotation_drift,
            self.translation_drift,
            self.pixel_noise,
            self.depth_noise,
        ];
        if amounts.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("scene {}: negative or non-finite amplitude", self.tag)));
        }
        Ok(())
    }
}

/// Seeded smooth camera path; `M_1` is the identity so the first frame is
/// the world frame.
pub fn gen_camera_path(spec: &SceneSpec, steps: usize, seed: u64) -> PoseChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rho: f64 = 0.8;
    let fresh = (1.0 - rho * rho).sqrt();
    let mut omega = Vector3::zeros();
    let mut vel = Vector3::zeros();
    let mut poses = Vec::with_capacity(steps);
    for t in 0..steps {
        let xi = Vector3::from_fn(|_, _| normal.sample(&mut rng));
        let eta = Vector3::from_fn(|_, _| normal.sample(&mut rng));
        omega = omega * rho + xi * fresh;
        vel = vel * rho + eta * fresh;
        if t == 0 {
            poses.push(Pose::identity());
            continue;
        }
        let rot = Rotation3::new(omega * spec.rotation_drift);
        poses.push(Pose::from_parts(&rot, vel * spec.translation_drift));
    }
    PoseChain::new(poses)
}

/// Width, height and channel count of the stored frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameShape {
    pub const DESK: FrameShape = FrameShape {
        height: 16,
        width: 16,
        channels: 1,
    };

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Rendering parameters for [`render_frame`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams {
    pub shape: FrameShape,
    pub blob_weight: f64,
    /// Blob standard deviation in frame pixels.
    pub blob_sigma: f64,
    pub noise: f64,
}

/// Grayscale frame with a Gaussian blob at the projected point.
pub fn render_frame(p_local: Point3, k: &CameraIntrinsics, params: &RenderParams, seed: u64) -> Result<Vec<f64>> {
    let uv = normalize_pixel(project(p_local, k)?, k);
    let FrameShape { height, width, channels } = params.shape;
    let cx = uv[0] * width as f64;
    let cy = uv[1] * height as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let inv = 1.0 / (2.0 * params.blob_sigma * params.blob_sigma);
    let mut out = Vec::with_capacity(params.shape.numel());
    for r in 0..height {
        for c in 0..width {
            let dx = c as f64 + 0.5 - cx;
            let dy = r as f64 + 0.5 - cy;
            let blob = params.blob_weight * (-(dx * dx + dy * dy) * inv).exp();
            for _ in 0..channels {
                let v = blob + if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                out.push((v / FRAME_QUANTUM).round() * FRAME_QUANTUM);
            }
        }
    }
    Ok(out)
}

/// One clip. Invalid-depth steps hold the unit-depth ray `[x/z, y/z, 0]`
/// in `points_local`, and `points_global` is only meaningful where the
/// depth is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub id: String,
    pub scene: String,
    pub intrinsics: CameraIntrinsics,
    pub poses: PoseChain,
    pub points_local: Vec<Point3>,
    pub points_global: Vec<Point3>,
    pub valid_depth: Vec<bool>,
    pub frames: Vec<Vec<f64>>,
}

impl TrajectorySample {
    pub fn horizon(&self) -> usize {
        self.points_local.len()
    }

    pub fn is_fully_valid(&self) -> bool {
        self.valid_depth.iter().all(|v| *v)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        let lens = [self.poses.len(), self.points_global.len(), self.valid_depth.len(), self.frames.len()];
        if lens.iter().any(|&l| l != t) {
            return Err(Error::LengthMismatch(format!("sample {}: horizon {t}, lengths {lens:?}", self.id)));
        }
        self.intrinsics.validate()
    }

    fn from_record(rec: SampleRecord) -> Result<Self> {
        let poses = rec
            .poses
            .iter()
            .map(|m| {
                let arr: [f64; 16] = m
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::InvalidPose(format!("expected 16 values, got {}", m.len())))?;
                Pose::from_row_major(&arr)
            })
            .collect::<Result<Vec<_>>>()?;
        let poses = PoseChain::new(poses);
        if rec.points_local.len() != rec.horizon {
            return Err(Error::LengthMismatch(format!(
                "sample {}: T = {} but {} points",
                rec.id,
                rec.horizon,
                rec.points_local.len()
            )));
        }
        let points_global = global_points(&poses, &rec.points_local)?;
        let sample = TrajectorySample {
            id: rec.id,
            scene: rec.scene,
            intrinsics: rec.intrinsics,
            poses,
            points_local: rec.points_local,
            points_global,
            valid_depth: rec.valid_depth,
            frames: rec.frames,
        };
        sample.validate()?;
        Ok(sample)
    }

    fn to_record(&self) -> SampleRecord {
        SampleRecord {
            id: self.id.clone(),
            scene: self.scene.clone(),
            horizon: self.horizon(),
            intrinsics: self.intrinsics,
            poses: self.poses.poses().iter().map(|p| p.to_row_major().to_vec()).collect(),
            points_local: self.points_local.clone(),
            valid_depth: self.valid_depth.clone(),
            frames: self.frames.clone(),
        }
    }
}

pub fn global_points(chain: &PoseChain, local: &[Point3]) -> Result<Vec<Point3>> {
    local
        .iter()
        .enumerate()
        .map(|(i, p)| chain.local_to_global(*p, i + 1))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    scene: String,
    #[serde(rename = "T")]
    horizon: usize,
    intrinsics: CameraIntrinsics,
    poses: Vec<Vec<f64>>,
    points_local: Vec<Point3>,
    valid_depth: Vec<bool>,
    frames: Vec<Vec<f64>>,
}

/// Per-axis min/max used for the `[-1, 1]` mapping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Point3,
    pub max: Point3,
}

impl NormStats {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Result<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        let stats = NormStats { min, max };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.max[i] > self.min[i]) || !self.min[i].is_finite() || !self.max[i].is_finite() {
                return Err(Error::Config(format!(
                    "degenerate normalization range on axis {i}: [{}, {}]",
                    self.min[i], self.max[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test_seen: Vec<String>,
    pub test_unseen: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub seed: u64,
    pub splits: Splits,
    /// Global-frame statistics.
    pub norm: NormStats,
    pub norm_local: NormStats,
    pub frame_shape: FrameShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    pub profile: Profile,
    pub frame_shape: FrameShape,
    pub blob_sigma: f64,
    /// Number of scenes drawn by [`default_scenes`] and how many are held out.
    pub scenes: usize,
    pub unseen_scenes: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub duration_min: usize,
    pub duration_max: usize,
    pub rotation_drift: f64,
    pub translation_drift: f64,
    pub pixel_noise: f64,
    pub depth_noise: f64,
    pub dropout: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 640,
            seed: 7,
            profile: Profile::MinJerk,
            frame_shape: FrameShape::DESK,
            blob_sigma: 1.0,
            scenes: 14,
            unseen_scenes: 3,
            val_fraction: 0.1,
            test_fraction: 0.1,
            duration_min: 20,
            duration_max: 20,
            rotation_drift: 0.004,
            translation_drift: 0.002,
            pixel_noise: 0.05,
            depth_noise: 0.002,
            dropout: 0.05,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset size must be at least 1".into()));
        }
        if self.scenes == 0 || self.unseen_scenes >= self.scenes {
            return Err(Error::Config(format!(
                "{} unseen of {} scenes leaves no seen scene",
                self.unseen_scenes, self.scenes
            )));
        }
        let f = self.val_fraction + self.test_fraction;
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || f >= 1.0 {
            return Err(Error::Config(format!("split fractions {} + {} must be below 1", self.val_fraction, self.test_fraction)));
        }
        if self.frame_shape.numel() == 0 || self.blob_sigma <= 0.0 {
            return Err(Error::Config("frame shape and blob width must be positive".into()));
        }
        Ok(())
    }
}

/// Scene templates drawn from the dataset seed. Starts sit near the body,
/// targets on a desk in front of the camera.
pub fn default_scenes(cfg: &DatasetConfig) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5CE7_E5));
    (0..cfg.scenes)
        .map(|i| {
            let start = [rng.random_range(-0.12..0.12), rng.random_range(0.08..0.16), rng.random_range(0.28..0.36)];
            let target = [rng.random_range(-0.2..0.2), rng.random_range(-0.05..0.1), rng.random_range(0.45..0.65)];
            SceneSpec {
                tag: format!("scene{i:02}"),
                start,
                target,
                spread: 0.04,
                duration_min: cfg.duration_min,
                duration_max: cfg.duration_max,
                rotation_drift: cfg.rotation_drift,
                translation_drift: cfg.translation_drift,
                pixel_noise: cfg.pixel_noise,
                depth_noise: cfg.depth_noise,
                dropout: cfg.dropout,
                seed: rng.random(),
            }
        })
        .collect()
}

pub struct Dataset {
    pub samples: Vec<TrajectorySample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&TrajectorySample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples listed in a split, in manifest order.
    pub fn split(&self, ids: &[String]) -> Result<Vec<&TrajectorySample>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::Config(format!("split lists unknown sample {id}"))))
            .collect()
    }
}

/// Generated sample together with its noiseless ground truth.
pub struct GeneratedSample {
    pub sample: TrajectorySample,
    pub true_local: Vec<Point3>,
}

/// Builds sample `index`; independent of every other index.
pub fn gen_sample(cfg: &DatasetConfig, scenes: &[SceneSpec], index: usize) -> Result<GeneratedSample> {
    let scene = &scenes[index % scenes.len()];
    scene.validate()?;
    let seed = sample_seed(cfg.seed ^ scene.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = rng.random_range(scene.duration_min..=scene.duration_max);
    let jitter = |rng: &mut ChaCha8Rng, p: Point3| -> Point3 {
        if scene.spread == 0.0 {
            return p;
        }
        [
            p[0] + rng.random_range(-scene.spread..=scene.spread),
            p[1] + rng.random_range(-scene.spread..=scene.spread),
            p[2] + rng.random_range(-scene.spread..=scene.spread),
        ]
    };
    let s0 = jitter(&mut rng, scene.start);
    let s1 = jitter(&mut rng, scene.target);
    let world = profile_points(s0, s1, steps, cfg.profile)?;
    let poses = gen_camera_path(scene, steps, rng.random());
    let true_local = world
        .iter()
        .enumerate()
        .map(|(i, p)| poses.global_to_local(*p, i + 1))
        .collect::<Result<Vec<_>>>()?;

    let k = CameraIntrinsics::H2O;
    let params = RenderParams {
        shape: cfg.frame_shape,
        blob_weight: 1.0,
        blob_sigma: cfg.blob_sigma,
        noise: scene.pixel_noise,
    };
    let frames = true_local
        .iter()
        .map(|p| render_frame(*p, &k, &params, rng.random()))
        .collect::<Result<Vec<_>>>()?;

    let depth_noise = Normal::new(0.0, scene.depth_noise).map_err(|e| Error::Config(e.to_string()))?;
    let max_dropped = steps.saturating_sub(MIN_KEPT_DEPTHS);
    let mut dropped = 0;
    let mut valid_depth = Vec::with_capacity(steps);
    let mut points_local = Vec::with_capacity(steps);
    for p in &true_local {
        let drop = scene.dropout > 0.0 && rng.random::<f64>() < scene.dropout && dropped < max_dropped;
        let z = p[2] + if scene.depth_noise > 0.0 { depth_noise.sample(&mut rng) } else { 0.0 };
        if drop {
            dropped += 1;
            points_local.push([p[0] / p[2], p[1] / p[2], 0.0]);
        } else {
            // the measured depth slides the point along its true viewing ray
            points_local.push([p[0] / p[2] * z, p[1] / p[2] * z, z]);
        }
        valid_depth.push(!drop);
    }
    let points_global = global_points(&poses, &points_local)?;
    Ok(GeneratedSample {
        sample: TrajectorySample {
            id: format!("s{index:05}"),
            scene: scene.tag.clone(),
            intrinsics: k,
            poses,
            points_local,
            points_global,
            valid_depth,
            frames,
        },
        true_local,
    })
}

/// Generates the dataset and its manifest. Normalization statistics come
/// from the noiseless trajectories of all samples.
pub fn gen_dataset(cfg: &DatasetConfig, scenes: &[SceneSpec]) -> Result<Dataset> {
    cfg.validate()?;
    if scenes.len() <= cfg.unseen_scenes {
        return Err(Error::Config(format!("{} scenes for {} unseen", scenes.len(), cfg.unseen_scenes)));
    }
    let mut samples = Vec::with_capacity(cfg.n);
    let mut global = Vec::new();
    let mut local = Vec::new();
    for i in 0..cfg.n {
        let g = gen_sample(cfg, scenes, i)?;
        for (t, p) in g.true_local.iter().enumerate() {
            global.push(g.sample.poses.local_to_global(*p, t + 1)?);
        }
        local.extend(g.true_local);
        samples.push(g.sample);
    }
    let unseen: Vec<&str> = scenes[scenes.len() - cfg.unseen_scenes..].iter().map(|s| s.tag.as_str()).collect();
    let mut splits = Splits::default();
    let mut seen = Vec::new();
    for s in &samples {
        if unseen.contains(&s.scene.as_str()) {
            splits.test_unseen.push(s.id.clone());
        } else {
            seen.push(s.id.clone());
        }
    }
    seen.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed)));
    let n_val = (seen.len() as f64 * cfg.val_fraction).round() as usize;
    let n_test = (seen.len() as f64 * cfg.test_fraction).round() as usize;
    splits.val = seen[..n_val].to_vec();
    splits.test_seen = seen[n_val..n_val + n_test].to_vec();
    splits.train = seen[n_val + n_test..].to_vec();
    for list in [&mut splits.train, &mut splits.val, &mut splits.test_seen] {
        list.sort();
    }
    let manifest = Manifest {
        n: cfg.n,
        seed: cfg.seed,
        splits,
        norm: NormStats::from_points(&global)?,
        norm_local: NormStats::from_points(&local)?,
        frame_shape: cfg.frame_shape,
    };
    Ok(Dataset { samples, manifest })
}

pub fn write_samples<W: Write>(mut w: W, samples: &[TrajectorySample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<TrajectorySample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(TrajectorySample::from_record(rec).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_samples(BufWriter::new(File::create(dir.join(SAMPLES_FILE))?), &dataset.samples)?;
    let mut m = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut m, &dataset.manifest)?;
    m.write_all(b"\n")?;
    m.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let samples = read_samples(BufReader::new(File::open(dir.join(SAMPLES_FILE))?))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    Ok(Dataset { samples, manifest })
}
