//! The USST network.
//!
//! Stages, in order: frame embedding through a frozen convolutional body
//! with learnable prompt pixels and head, point embedding `f_T`, masked
//! temporal encoders `g_V` and `g_T`, the attention-based state transition,
//! per-step probabilistic emission and the velocity head.
//!
//! Encoder tensors are batch-major (`row = b * T + t`); transition and
//! emission tensors are time-major (`row = t * n + b`).

mod layers;
mod params;

use std::path::Path;

use serde::{Deserialize, Serialize};
use usst_numcore::{Graph, Tensor, Var};

pub use layers::{attention_mask, key_mask, masked_attention, positional_encoding};
pub use params::{load_archive, save_archive, Bound, Param, ParamStore};

use layers::{add_attention, add_layer_norm, add_linear, add_mlp2, pe_rows, Ctx};
use params::Init;

use crate::datagen::FrameShape;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordinateMode {
    #[serde(rename = "global-3d")]
    Global3d,
    #[serde(rename = "local-3d")]
    Local3d,
    #[serde(rename = "2d")]
    TwoD,
}

impl CoordinateMode {
    pub fn dim(self) -> usize {
        match self {
            CoordinateMode::TwoD => 2,
            _ => 3,
        }
    }

    pub fn is_3d(self) -> bool {
        self != CoordinateMode::TwoD
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UsstConfig {
    pub t_max: usize,
    pub d_obs: usize,
    pub d_z: usize,
    pub blocks: usize,
    pub heads: usize,
    pub transition_heads: usize,
    pub mlp_ratio: usize,
    pub frame: FrameShape,
    pub prompt_width: usize,
    /// Output channels of the frozen stride-2 convolutions.
    pub encoder_channels: Vec<usize>,
    pub head_hidden: usize,
    pub traj_hidden: usize,
    pub emission_hidden: usize,
    pub coordinate_mode: CoordinateMode,
    /// Softplus on the uncertainty heads; off gives raw linear outputs.
    pub uncertainty_softplus: bool,
    pub init_seed: u64,
}

impl Default for UsstConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UsstConfig {
    pub fn desk() -> Self {
        Self {
            t_max: 40,
            d_obs: 32,
            d_z: 16,
            blocks: 2,
            heads: 4,
            transition_heads: 2,
            mlp_ratio: 4,
            frame: FrameShape::DESK,
            prompt_width: 2,
            encoder_channels: vec![4, 8],
            head_hidden: 64,
            traj_hidden: 32,
            emission_hidden: 32,
            coordinate_mode: CoordinateMode::Global3d,
            uncertainty_softplus: true,
            init_seed: 0,
        }
    }

    /// Dimensions reported for the full-size model, with the small frozen
    /// body standing in for the pretrained backbone.
    pub fn full() -> Self {
        Self {
            t_max: 40,
            d_obs: 256,
            d_z: 16,
            blocks: 6,
            heads: 8,
            transition_heads: 4,
            mlp_ratio: 4,
            frame: FrameShape {
                height: 64,
                width: 64,
                channels: 3,
            },
            prompt_width: 5,
            encoder_channels: vec![32, 64],
            head_hidden: 512,
            traj_hidden: 128,
            emission_hidden: 128,
            coordinate_mode: CoordinateMode::Global3d,
            uncertainty_softplus: true,
            init_seed: 0,
        }
    }

    /// Tiny model for gradient checks.
    pub fn tiny() -> Self {
        Self {
            t_max: 8,
            d_obs: 8,
            d_z: 8,
            blocks: 1,
            heads: 2,
            transition_heads: 2,
            mlp_ratio: 2,
            frame: FrameShape {
                height: 6,
                width: 6,
                channels: 1,
            },
            prompt_width: 1,
            encoder_channels: vec![2],
            head_hidden: 8,
            traj_hidden: 8,
            emission_hidden: 8,
            coordinate_mode: CoordinateMode::Global3d,
            uncertainty_softplus: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_max", self.t_max),
            ("d_obs", self.d_obs),
            ("d_z", self.d_z),
            ("heads", self.heads),
            ("transition_heads", self.transition_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("head_hidden", self.head_hidden),
            ("traj_hidden", self.traj_hidden),
            ("emission_hidden", self.emission_hidden),
            ("frame.height", self.frame.height),
            ("frame.width", self.frame.width),
            ("frame.channels", self.frame.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_obs % self.heads != 0 {
            return Err(Error::Config(format!("d_obs {} not divisible by heads {}", self.d_obs, self.heads)));
        }
        if self.d_z % self.transition_heads != 0 {
            return Err(Error::Config(format!(
                "d_z {} not divisible by transition_heads {}",
                self.d_z, self.transition_heads
            )));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn coord_dim(&self) -> usize {
        self.coordinate_mode.dim()
    }

    pub fn uncertainty_dim(&self) -> usize {
        if self.coordinate_mode.is_3d() {
            2
        } else {
            1
        }
    }

    /// Prompt pixels per channel: `(H + 2p)(W + 2p) - HW`.
    pub fn prompt_pixels(&self) -> usize {
        let p = self.prompt_width;
        (self.frame.height + 2 * p) * (self.frame.width + 2 * p) - self.frame.height * self.frame.width
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.frame.height + 2 * self.prompt_width, self.frame.width + 2 * self.prompt_width)
    }

    /// Channels, height and width after the frozen body.
    pub fn encoder_output(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = self.canvas();
        let mut c = self.frame.channels;
        for &o in &self.encoder_channels {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
            c = o;
        }
        (c, h, w)
    }

    /// Parameter totals derived from the dimensions alone.
    pub fn param_count(&self) -> ParamCount {
        let lin = |i: usize, o: usize| i * o + o;
        let ln = |d: usize| 2 * d;
        let mlp = |i: usize, h: usize, o: usize| lin(i, h) + lin(h, o);
        let (d, dz, cd) = (self.d_obs, self.d_z, self.coord_dim());

        let mut frozen = 0;
        let mut c_in = self.frame.channels;
        for &o in &self.encoder_channels {
            frozen += o * c_in * 9 + o;
            c_in = o;
        }
        let prompt = self.frame.channels * self.prompt_pixels();
        let (c, h, w) = self.encoder_output();
        let frame_head = mlp(c * h * w, self.head_hidden, d);
        let traj = mlp(cd, self.traj_hidden, d);
        // attention: q, v, o projections with bias, k without
        let attn = |dq: usize, dkv: usize, d: usize| lin(dq, d) + dkv * d + lin(dkv, d) + lin(d, d);
        let block = attn(d, d, d) + ln(d) + mlp(d, self.mlp_ratio * d, d) + ln(d);
        let encoders = 2 * self.blocks * block;
        let transition = mlp(2 * d, 2 * dz, dz)
            + ln(dz)
            + attn(dz, dz, dz)
            + ln(2 * dz)
            + attn(2 * dz, dz, dz)
            + ln(3 * dz)
            + mlp(3 * dz, 2 * dz, dz)
            + mlp(4 * dz, 2 * dz, dz)
            + ln(dz);
        let z0 = dz;
        let emission = lin(d, d)
            + mlp(dz + d, self.emission_hidden, cd)
            + mlp(dz + d, self.emission_hidden, self.uncertainty_dim());
        let velocity = lin(dz, self.emission_hidden) + ln(self.emission_hidden) + lin(self.emission_hidden, cd);
        let trainable = prompt + frame_head + traj + encoders + transition + z0 + emission + velocity;
        ParamCount {
            frozen,
            prompt,
            trainable,
            total: frozen + trainable,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub frozen: usize,
    pub prompt: usize,
    pub trainable: usize,
    pub total: usize,
}

/// One batch of clips padded to a shared horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub n: usize,
    pub horizon: usize,
    pub horizons: Vec<usize>,
    pub observed: Vec<usize>,
    /// `[n * horizon, channels * height * width]`, batch-major.
    pub frames: Vec<f64>,
    /// `[n * horizon, coord_dim]` normalized coordinates, batch-major.
    pub points: Vec<f64>,
}

impl ModelInput {
    pub fn validate(&self, cfg: &UsstConfig) -> Result<()> {
        let rows = self.n * self.horizon;
        if self.n == 0 || self.horizons.len() != self.n || self.observed.len() != self.n {
            return Err(Error::LengthMismatch(format!(
                "batch of {} with {} horizons and {} observed counts",
                self.n,
                self.horizons.len(),
                self.observed.len()
            )));
        }
        if self.horizon > cfg.t_max {
            return Err(Error::Config(format!("horizon {} exceeds t_max {}", self.horizon, cfg.t_max)));
        }
        for (&t, &c) in self.horizons.iter().zip(&self.observed) {
            if t > self.horizon || c == 0 || c >= t {
                return Err(Error::Config(format!("observed count {c} must lie in 1..{t} (padded horizon {})", self.horizon)));
            }
        }
        if self.frames.len() != rows * cfg.frame.numel() || self.points.len() != rows * cfg.coord_dim() {
            return Err(Error::LengthMismatch(format!(
                "frames {} / points {} for {rows} rows",
                self.frames.len(),
                self.points.len()
            )));
        }
        Ok(())
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Trace {
    /// Frame and point embeddings, `[n * T, d_obs]`; unobserved rows are zero.
    pub x_v: Var,
    pub x_t: Var,
    pub o_v: Var,
    pub o_t: Var,
    /// `[n * T, d_z]` batch-major.
    pub h: Var,
    /// `[T * n, d_z]` time-major.
    pub z: Var,
    pub mean: Var,
    pub alpha: Var,
    pub beta: Option<Var>,
    pub velocity: Var,
}

/// Per-step predictions for one clip, in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastOutput {
    pub mean: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: UsstConfig,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Usst {
    pub config: UsstConfig,
    pub params: ParamStore,
}

impl Usst {
    pub fn new(config: UsstConfig) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config);
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        save_archive(
            path,
            &self.params,
            &CheckpointMeta {
                config: self.config.clone(),
                epoch,
            },
        )
    }

    /// Loads a checkpoint and checks it against the layout of its config.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let (params, meta): (ParamStore, CheckpointMeta) = load_archive(path)?;
        let fresh = Usst::new(meta.config)?;
        if fresh.params.len() != params.len()
            || fresh
                .params
                .params()
                .iter()
                .zip(params.params())
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape() || a.frozen != b.frozen)
        {
            return Err(Error::Config(format!("checkpoint {} does not match its config", path.display())));
        }
        Ok((
            Self {
                config: fresh.config,
                params,
            },
            meta.epoch,
        ))
    }

    /// Builds the forward pass into `g` with parameters already bound.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, input: &ModelInput) -> Result<Trace> {
        input.validate(&self.config)?;
        let mut ctx = Ctx::new(g, &self.params, bound);
        let cfg = &self.config;
        let (n, t) = (input.n, input.horizon);

        let observed_rows: Vec<usize> = (0..n)
            .flat_map(|b| (0..input.observed[b]).map(move |s| b * t + s))
            .collect();
        // batch-major row -> index among observed rows
        let mut scatter = vec![None; n * t];
        for (i, &r) in observed_rows.iter().enumerate() {
            scatter[r] = Some(i);
        }

        let x_v = {
            let feats = self.encode_frames(&mut ctx, input, &observed_rows)?;
            ctx.g.gather_rows(feats, &scatter)?
        };
        let x_t = {
            let cd = cfg.coord_dim();
            let pts: Vec<f64> = observed_rows
                .iter()
                .flat_map(|&r| input.points[r * cd..(r + 1) * cd].iter().copied())
                .collect();
            let pts = ctx.g.constant(Tensor::new(vec![observed_rows.len(), cd], pts)?);
            let e = ctx.mlp2(pts, "traj")?;
            ctx.g.gather_rows(e, &scatter)?
        };

        let mask = ctx.g.constant(attention_mask(&input.observed, t, cfg.heads)?);
        let pe = ctx.g.constant(pe_rows(n, t, cfg.d_obs));
        let o_v = self.temporal_encode(&mut ctx, "enc_v", x_v, pe, mask, n, t)?;
        let o_t = self.temporal_encode(&mut ctx, "enc_t", x_t, pe, mask, n, t)?;

        let (h, z) = self.transition(&mut ctx, o_v, o_t, input)?;
        let (mean, alpha, beta) = self.emit(&mut ctx, z, o_t, input)?;
        let velocity = self.velocity_head(&mut ctx, z)?;
        Ok(Trace {
            x_v,
            x_t,
            o_v,
            o_t,
            h,
            z,
            mean,
            alpha,
            beta,
            velocity,
        })
    }

    /// Prompted canvas through the frozen body and the learnable head.
    fn encode_frames(&self, ctx: &mut Ctx, input: &ModelInput, rows: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        let FrameShape { height, width, channels } = cfg.frame;
        let numel = cfg.frame.numel();
        let m = rows.len();
        let mut data = Vec::with_capacity(m * numel);
        for &r in rows {
            data.extend_from_slice(&input.frames[r * numel..(r + 1) * numel]);
        }
        let frames = ctx.g.constant(Tensor::new(vec![m * numel], data)?);
        let p = cfg.prompt_width;
        let (ch_h, ch_w) = cfg.canvas();
        let mut x = if p == 0 {
            // (row, col, channel) -> (channel, row, col)
            let hwc = ctx.g.reshape(frames, &[m, height, width, channels])?;
            ctx.g.permute(hwc, &[0, 3, 1, 2])?
        } else {
            let prompt = ctx.w("prompt")?;
            let np = cfg.prompt_pixels();
            let prompt = ctx.g.reshape(prompt, &[channels * np])?;
            let source = ctx.g.concat(&[frames, prompt], 0)?;
            let base = m * numel;
            let mut index = Vec::with_capacity(m * channels * ch_h * ch_w);
            for i in 0..m {
                for c in 0..channels {
                    let mut k = 0;
                    for y in 0..ch_h {
                        for xx in 0..ch_w {
                            let inside = y >= p && y < p + height && xx >= p && xx < p + width;
                            if inside {
                                // frames are stored (row, col, channel)
                                index.push(Some(i * numel + ((y - p) * width + (xx - p)) * channels + c));
                            } else {
                                index.push(Some(base + c * np + k));
                                k += 1;
                            }
                        }
                    }
                }
            }
            ctx.g.gather(source, index, vec![m, channels, ch_h, ch_w])?
        };
        for i in 0..cfg.encoder_channels.len() {
            let k = ctx.w(&format!("frame_encoder.conv{i}.kernel"))?;
            let b = ctx.w(&format!("frame_encoder.conv{i}.bias"))?;
            let y = ctx.g.conv2d(x, k, b, 2, 1)?;
            x = ctx.g.tanh(y);
        }
        let (c, h, w) = cfg.encoder_output();
        let flat = ctx.g.reshape(x, &[m, c * h * w])?;
        ctx.mlp2(flat, "frame_head")
    }

    #[allow(clippy::too_many_arguments)]
    fn temporal_encode(&self, ctx: &mut Ctx, name: &str, x: Var, pe: Var, mask: Var, n: usize, t: usize) -> Result<Var> {
        let mut x = ctx.g.add(x, pe)?;
        for k in 0..self.config.blocks {
            let prefix = format!("{name}.block{k}");
            let a = ctx.self_attention(x, &format!("{prefix}.attn"), n, t, self.config.heads, Some(mask))?;
            let r = ctx.g.add(x, a)?;
            x = ctx.layer_norm(r, &format!("{prefix}.ln1"))?;
            let f = ctx.mlp2(x, &format!("{prefix}.mlp"))?;
            let r = ctx.g.add(x, f)?;
            x = ctx.layer_norm(r, &format!("{prefix}.ln2"))?;
        }
        Ok(x)
    }

    fn transition(&self, ctx: &mut Ctx, o_v: Var, o_t: Var, input: &ModelInput) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (n, t, dz, heads) = (input.n, input.horizon, cfg.d_z, cfg.transition_heads);
        let dh = dz / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let o = ctx.g.concat(&[o_v, o_t], 1)?;
        let h = ctx.mlp2(o, "transition.h_mlp")?;
        let pe_h = ctx.g.constant(pe_rows(n, t, dz));
        let h = ctx.g.add(h, pe_h)?;
        let h = ctx.layer_norm(h, "transition.h_ln")?;

        let kh = ctx.project(h, "transition.cross.k")?;
        let vh = ctx.linear(h, "transition.cross.v")?;
        let kh = ctx.split_heads(kh, n, t, heads)?;
        let vh = ctx.split_heads(vh, n, t, heads)?;
        let cross_mask = ctx.g.constant(key_mask(&input.observed, t, heads)?);

        let z0 = ctx.w("z0")?;
        let mut z_prev = ctx.g.gather_rows(z0, &vec![Some(0); n])?;
        let k0 = ctx.project(z_prev, "transition.self.k")?;
        let v0 = ctx.linear(z_prev, "transition.self.v")?;
        let mut k_cache = ctx.g.reshape(k0, &[n, heads, 1, dh])?;
        let mut v_cache = ctx.g.reshape(v0, &[n, heads, 1, dh])?;
        let mut zs = Vec::with_capacity(t);
        for s in 0..t {
            let q = ctx.linear(z_prev, "transition.self.q")?;
            let q = ctx.g.reshape(q, &[n * heads, 1, dh])?;
            let k = ctx.g.reshape(k_cache, &[n * heads, s + 1, dh])?;
            let v = ctx.g.reshape(v_cache, &[n * heads, s + 1, dh])?;
            let logits = ctx.g.bmm(q, k, true)?;
            let logits = ctx.g.scale(logits, scale);
            let att = ctx.g.softmax_lastdim(logits)?;
            let sa = ctx.g.bmm(att, v, false)?;
            let sa = ctx.g.reshape(sa, &[n, dz])?;
            let sa = ctx.linear(sa, "transition.self.o")?;
            let cat = ctx.g.concat(&[z_prev, sa], 1)?;
            let w_bar = ctx.layer_norm(cat, "transition.ln_a")?;

            let q = ctx.linear(w_bar, "transition.cross.q")?;
            let q = ctx.g.reshape(q, &[n * heads, 1, dh])?;
            let ca = masked_attention(ctx.g, q, kh, vh, Some(cross_mask))?;
            let ca = ctx.g.reshape(ca, &[n, dz])?;
            let ca = ctx.linear(ca, "transition.cross.o")?;
            let cat = ctx.g.concat(&[w_bar, ca], 1)?;
            let w_hat = ctx.layer_norm(cat, "transition.ln_b")?;

            let inner = ctx.mlp2(w_hat, "transition.mlp_a")?;
            let cat = ctx.g.concat(&[w_hat, inner], 1)?;
            let out = ctx.mlp2(cat, "transition.mlp_b")?;
            let pe: Vec<f64> = (0..n).flat_map(|_| positional_encoding(s + 1, dz)).collect();
            let pe = ctx.g.constant(Tensor::new(vec![n, dz], pe)?);
            let out = ctx.g.add(out, pe)?;
            let z = ctx.layer_norm(out, "transition.ln_c")?;
            zs.push(z);

            if s + 1 < t {
                let kz = ctx.project(z, "transition.self.k")?;
                let vz = ctx.linear(z, "transition.self.v")?;
                let kz = ctx.g.reshape(kz, &[n, heads, 1, dh])?;
                let vz = ctx.g.reshape(vz, &[n, heads, 1, dh])?;
                k_cache = ctx.g.concat(&[k_cache, kz], 2)?;
                v_cache = ctx.g.concat(&[v_cache, vz], 2)?;
            }
            z_prev = z;
        }
        let z = ctx.g.concat(&zs, 0)?;
        Ok((h, z))
    }

    fn emit(&self, ctx: &mut Ctx, z: Var, o_t: Var, input: &ModelInput) -> Result<(Var, Var, Option<Var>)> {
        let cfg = &self.config;
        let (n, t, d, dz) = (input.n, input.horizon, cfg.d_obs, cfg.d_z);
        // o^T_{t-1} while it exists (t <= C + 1), zero at t = 1
        let prev_rows: Vec<Option<usize>> = (0..t)
            .flat_map(|s| (0..n).map(move |b| (s, b)))
            .map(|(s, b)| (s >= 1 && s <= input.observed[b]).then(|| b * t + s - 1))
            .collect();
        let prev_obs = ctx.g.gather_rows(o_t, &prev_rows)?;

        let mut means = Vec::with_capacity(t);
        let mut uncs = Vec::with_capacity(t);
        for s in 0..t {
            let z_s = ctx.g.narrow(z, 0, s * n, n)?;
            let mut prev = ctx.g.narrow(prev_obs, 0, s * n, n)?;
            let predicted: Vec<bool> = input.observed.iter().map(|&c| s > c).collect();
            if s > 0 && predicted.iter().any(|p| *p) {
                let keep: Vec<f64> = predicted
                    .iter()
                    .flat_map(|&p| std::iter::repeat_n(if p { 1.0 } else { 0.0 }, d))
                    .collect();
                let keep = ctx.g.constant(Tensor::new(vec![n, d], keep)?);
                let e = ctx.mlp2(means[s - 1], "traj")?;
                let e = ctx.linear(e, "emission.prev_proj")?;
                let e = ctx.g.mul(e, keep)?;
                prev = ctx.g.add(prev, e)?;
            }
            let x = ctx.g.concat(&[z_s, prev], 1)?;
            let m = ctx.mlp2(x, "emission.mean")?;
            means.push(ctx.g.tanh(m));
            let u = ctx.mlp2(x, "emission.unc")?;
            uncs.push(if cfg.uncertainty_softplus { ctx.g.softplus(u) } else { u });
        }
        debug_assert_eq!(ctx.g.shape(z)[1], dz);
        let mean = ctx.g.concat(&means, 0)?;
        let unc = ctx.g.concat(&uncs, 0)?;
        if cfg.coordinate_mode.is_3d() {
            let alpha = ctx.g.narrow(unc, 1, 0, 1)?;
            let beta = ctx.g.narrow(unc, 1, 1, 1)?;
            Ok((mean, alpha, Some(beta)))
        } else {
            Ok((mean, unc, None))
        }
    }

    fn velocity_head(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        let h = ctx.linear(z, "velocity.l0")?;
        let h = ctx.layer_norm(h, "velocity.ln")?;
        let h = ctx.g.tanh(h);
        let v = ctx.linear(h, "velocity.l1")?;
        Ok(ctx.g.tanh(v))
    }

    /// Inference without gradient tracking.
    pub fn forecast(&self, input: &ModelInput) -> Result<Vec<ForecastOutput>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let trace = self.forward(&mut g, &bound, input)?;
        Ok(self.unpack(&g, &trace, input))
    }

    /// Splits time-major graph outputs into per-clip forecasts cut at each
    /// clip's own horizon.
    pub fn unpack(&self, g: &Graph, trace: &Trace, input: &ModelInput) -> Vec<ForecastOutput> {
        let n = input.n;
        let cd = self.config.coord_dim();
        let mean = g.value(trace.mean).data();
        let vel = g.value(trace.velocity).data();
        let alpha = g.value(trace.alpha).data();
        let beta = trace.beta.map(|b| g.value(b).data());
        (0..n)
            .map(|b| {
                let rows: Vec<usize> = (0..input.horizons[b]).map(|s| s * n + b).collect();
                ForecastOutput {
                    mean: rows.iter().map(|&r| mean[r * cd..(r + 1) * cd].to_vec()).collect(),
                    alpha: rows.iter().map(|&r| alpha[r]).collect(),
                    beta: beta.map(|bv| rows.iter().map(|&r| bv[r]).collect()),
                    velocity: rows.iter().map(|&r| vel[r * cd..(r + 1) * cd].to_vec()).collect(),
                }
            })
            .collect()
    }
}

fn build_params(cfg: &UsstConfig) -> ParamStore {
    let mut s = ParamStore::new();
    let mut init = Init::new(cfg.init_seed);
    let (d, dz, cd) = (cfg.d_obs, cfg.d_z, cfg.coord_dim());

    let mut c_in = cfg.frame.channels;
    for (i, &o) in cfg.encoder_channels.iter().enumerate() {
        let a = (6.0 / ((c_in + o) * 9) as f64).sqrt() * 2.0;
        s.insert(format!("frame_encoder.conv{i}.kernel"), init.uniform(vec![o, c_in, 3, 3], a), true);
        s.insert(format!("frame_encoder.conv{i}.bias"), init.uniform(vec![o], 0.1), true);
        c_in = o;
    }
    if cfg.prompt_width > 0 {
        s.insert("prompt", init.uniform(vec![cfg.frame.channels, cfg.prompt_pixels()], 0.05), false);
    }
    let (c, h, w) = cfg.encoder_output();
    add_mlp2(&mut s, &mut init, "frame_head", c * h * w, cfg.head_hidden, d, 1.0);
    add_mlp2(&mut s, &mut init, "traj", cd, cfg.traj_hidden, d, 1.0);
    for enc in ["enc_v", "enc_t"] {
        for k in 0..cfg.blocks {
            let p = format!("{enc}.block{k}");
            add_attention(&mut s, &mut init, &format!("{p}.attn"), d, d, d);
            add_layer_norm(&mut s, &format!("{p}.ln1"), d);
            add_mlp2(&mut s, &mut init, &format!("{p}.mlp"), d, cfg.mlp_ratio * d, d, 1.0);
            add_layer_norm(&mut s, &format!("{p}.ln2"), d);
        }
    }
    add_mlp2(&mut s, &mut init, "transition.h_mlp", 2 * d, 2 * dz, dz, 1.0);
    add_layer_norm(&mut s, "transition.h_ln", dz);
    add_attention(&mut s, &mut init, "transition.self", dz, dz, dz);
    add_layer_norm(&mut s, "transition.ln_a", 2 * dz);
    add_attention(&mut s, &mut init, "transition.cross", 2 * dz, dz, dz);
    add_layer_norm(&mut s, "transition.ln_b", 3 * dz);
    add_mlp2(&mut s, &mut init, "transition.mlp_a", 3 * dz, 2 * dz, dz, 1.0);
    add_mlp2(&mut s, &mut init, "transition.mlp_b", 4 * dz, 2 * dz, dz, 1.0);
    add_layer_norm(&mut s, "transition.ln_c", dz);
    s.insert("z0", init.uniform(vec![1, dz], 1.0), false);
    add_linear(&mut s, &mut init, "emission.prev_proj", d, d, 1.0);
    add_mlp2(&mut s, &mut init, "emission.mean", dz + d, cfg.emission_hidden, cd, 0.1);
    add_mlp2(&mut s, &mut init, "emission.unc", dz + d, cfg.emission_hidden, cfg.uncertainty_dim(), 0.1);
    add_linear(&mut s, &mut init, "velocity.l0", dz, cfg.emission_hidden, 1.0);
    add_layer_norm(&mut s, "velocity.ln", cfg.emission_hidden);
    add_linear(&mut s, &mut init, "velocity.l1", cfg.emission_hidden, cd, 0.1);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts_match_store() {
        for cfg in [UsstConfig::desk(), UsstConfig::full(), UsstConfig::tiny()] {
            let model = Usst::new(cfg.clone()).unwrap();
            let count = cfg.param_count();
            assert_eq!(model.params.numel(), count.total);
            assert_eq!(model.params.trainable_numel(), count.trainable);
            let prompt = model.params.get("prompt").map_or(0, |p| p.value.numel());
            assert_eq!(prompt, count.prompt);
        }
    }

    #[test]
    fn prompt_pixel_count() {
        let mut cfg = UsstConfig::desk();
        cfg.frame = FrameShape {
            height: 64,
            width: 64,
            channels: 1,
        };
        cfg.prompt_width = 5;
        assert_eq!(cfg.prompt_pixels(), 1380);
        assert_eq!(cfg.param_count().prompt, 1380);
        assert_eq!(UsstConfig::full().param_count().prompt, 3 * 1380);
    }

    #[test]
    fn config_validation() {
        let mut cfg = UsstConfig::desk();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = UsstConfig::desk();
        cfg.d_z = 15;
        assert!(cfg.validate().is_err());
    }
}
