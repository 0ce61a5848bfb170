//! Uncertainty-aware losses: HAU, depth-robust DRAU and the velocity
//! constraint.
//!
//! Scalar functions work on plain slices and serve as references; the
//! batched graph version [`batch_loss`] is what training differentiates.

use serde::{Deserialize, Serialize};
use usst_numcore::{Graph, Pointwise, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::Trace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualKind {
    Squared,
    Huber,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub residual: ResidualKind,
    pub huber_delta: f64,
    pub gamma: f64,
    pub velocity_weight: f64,
    pub drau_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            residual: ResidualKind::Huber,
            huber_delta: 1e-5,
            gamma: 0.1,
            velocity_weight: 1.0,
            drau_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber_delta must be positive, got {}", self.huber_delta)));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("velocity_weight", self.velocity_weight),
            ("drau_weight", self.drau_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    fn pointwise(&self) -> Pointwise {
        match self.residual {
            ResidualKind::Squared => Pointwise::Square,
            ResidualKind::Huber => Pointwise::Huber(self.huber_delta),
        }
    }
}

fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

/// Squared distance, or the summed per-coordinate Huber penalty.
pub fn residual(p: &[f64], p_hat: &[f64], kind: ResidualKind, delta: f64) -> Result<f64> {
    if p.len() != p_hat.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} coordinates", p.len(), p_hat.len())));
    }
    Ok(p.iter()
        .zip(p_hat)
        .map(|(a, b)| match kind {
            ResidualKind::Squared => (a - b) * (a - b),
            ResidualKind::Huber => huber(a - b, delta),
        })
        .sum())
}

/// `e^{-α} · residual + α`
pub fn hau_loss(alpha: f64, p_hat: &[f64], p: &[f64], cfg: &LossConfig) -> Result<f64> {
    Ok((-alpha).exp() * residual(p, p_hat, cfg.residual, cfg.huber_delta)? + alpha)
}

/// `softmax(-Δz)` with `Δz_t = |z_t - z_{t-1}|` and `z_0 := z_1`.
pub fn depth_weights(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let logits: Vec<f64> = (0..z.len())
        .map(|t| if t == 0 { 0.0 } else { -(z[t] - z[t - 1]).abs() })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-step predictions of one clip as plain slices.
#[derive(Clone, Copy, Debug)]
pub struct StepOutputs<'a> {
    pub mean: &'a [Vec<f64>],
    pub alpha: &'a [f64],
    pub beta: Option<&'a [f64]>,
    pub velocity: &'a [Vec<f64>],
}

impl<'a> From<&'a crate::model::ForecastOutput> for StepOutputs<'a> {
    fn from(o: &'a crate::model::ForecastOutput) -> Self {
        Self {
            mean: &o.mean,
            alpha: &o.alpha,
            beta: o.beta.as_deref(),
            velocity: &o.velocity,
        }
    }
}

/// Time-averaged `hau(α̂, p̂_xy, p_xy) + w_t · hau(β̂, ẑ, z)`.
pub fn drau_loss(out: StepOutputs, target: &[Vec<f64>], weights: &[f64], cfg: &LossConfig) -> Result<f64> {
    let beta = out
        .beta
        .ok_or_else(|| Error::Contract("DRAU needs a depth uncertainty; use hau_2d_loss in 2d mode".into()))?;
    let t = target.len();
    if out.mean.len() != t || out.alpha.len() != t || beta.len() != t || weights.len() != t {
        return Err(Error::LengthMismatch(format!("horizon {t} against outputs and weights")));
    }
    let mut total = 0.0;
    for i in 0..t {
        let (p, q) = (&target[i], &out.mean[i]);
        if p.len() != 3 || q.len() != 3 {
            return Err(Error::Contract("DRAU expects 3D points".into()));
        }
        total += hau_loss(out.alpha[i], &q[..2], &p[..2], cfg)? + weights[i] * hau_loss(beta[i], &q[2..], &p[2..], cfg)?;
    }
    Ok(total / t as f64)
}

/// Time-averaged HAU over all coordinates, used when there is no depth.
pub fn hau_2d_loss(out: StepOutputs, target: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    let t = target.len();
    if out.mean.len() != t || out.alpha.len() != t {
        return Err(Error::LengthMismatch(format!("horizon {t} against outputs")));
    }
    let mut total = 0.0;
    for i in 0..t {
        total += hau_loss(out.alpha[i], &out.mean[i], &target[i], cfg)?;
    }
    Ok(total / t as f64)
}

/// `Σ_t ‖p_t - p_{t-1} - v̂_t‖² + γ Σ_{t>C} ‖p_C + Σ_{C<i≤t} v̂_i - p̂_t‖²`
/// with `p_0 = 0`; `observed` is `C` (1-based count).
pub fn velocity_loss(velocity: &[Vec<f64>], mean: &[Vec<f64>], target: &[Vec<f64>], observed: usize, gamma: f64) -> Result<f64> {
    let t = target.len();
    if velocity.len() != t || mean.len() != t {
        return Err(Error::LengthMismatch(format!("horizon {t} against velocity and mean")));
    }
    if observed == 0 || observed > t {
        return Err(Error::Config(format!("observed count {observed} outside 1..={t}")));
    }
    let d = target[0].len();
    let mut first = 0.0;
    for i in 0..t {
        for k in 0..d {
            let prev = if i == 0 { 0.0 } else { target[i - 1][k] };
            let r = target[i][k] - prev - velocity[i][k];
            first += r * r;
        }
    }
    let mut warp = 0.0;
    let mut acc = target[observed - 1].clone();
    for i in observed..t {
        for k in 0..d {
            acc[k] += velocity[i][k];
            let r = acc[k] - mean[i][k];
            warp += r * r;
        }
    }
    Ok(first + gamma * warp)
}

/// Parts of the objective for one clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub drau: f64,
    pub velo: f64,
}

/// `drau_weight · L_DRAU + velocity_weight · L_velo / T` for one clip.
pub fn total_loss(out: StepOutputs, target: &[Vec<f64>], observed: usize, cfg: &LossConfig) -> Result<LossParts> {
    let drau = if out.beta.is_some() {
        let z: Vec<f64> = target.iter().map(|p| p[2]).collect();
        drau_loss(out, target, &depth_weights(&z), cfg)?
    } else {
        hau_2d_loss(out, target, cfg)?
    };
    let velo = velocity_loss(out.velocity, out.mean, target, observed, cfg.gamma)? / target.len() as f64;
    Ok(LossParts {
        total: cfg.drau_weight * drau + cfg.velocity_weight * velo,
        drau,
        velo,
    })
}

/// Ground truth for one padded batch, matching a [`crate::model::ModelInput`].
#[derive(Clone, Debug)]
pub struct BatchTargets {
    pub n: usize,
    pub horizon: usize,
    pub horizons: Vec<usize>,
    pub observed: Vec<usize>,
    /// `[n * horizon, coord_dim]` batch-major; padded rows are ignored.
    pub points: Vec<f64>,
    pub coord_dim: usize,
}

pub struct LossVars {
    pub total: Var,
    pub drau: Var,
    pub velo: Var,
}

/// Batched objective: each clip's loss averaged over its own horizon, then
/// averaged over the batch. Padded steps carry zero weight.
pub fn batch_loss(g: &mut Graph, trace: &Trace, targets: &BatchTargets, cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    let (n, t, cd) = (targets.n, targets.horizon, targets.coord_dim);
    let rows = n * t;
    let at = |b: usize, s: usize| &targets.points[(b * t + s) * cd..(b * t + s + 1) * cd];
    // time-major row r = s * n + b
    let mut p = vec![0.0; rows * cd];
    let mut step = vec![0.0; rows * cd];
    let mut p_c = vec![0.0; rows * cd];
    let mut w_row = vec![0.0; rows];
    let mut w_future = vec![0.0; rows];
    let mut future_mask = vec![0.0; rows * cd];
    let mut depth_w = vec![0.0; rows];
    for b in 0..n {
        let (tb, cb) = (targets.horizons[b], targets.observed[b]);
        let z: Vec<f64> = (0..tb).map(|s| at(b, s)[cd - 1]).collect();
        let dw = depth_weights(&z);
        for s in 0..tb {
            let r = s * n + b;
            let scale = 1.0 / (tb as f64 * n as f64);
            w_row[r] = scale;
            depth_w[r] = scale * dw[s];
            for k in 0..cd {
                p[r * cd + k] = at(b, s)[k];
                step[r * cd + k] = at(b, s)[k] - if s == 0 { 0.0 } else { at(b, s - 1)[k] };
                p_c[r * cd + k] = at(b, cb - 1)[k];
            }
            if s >= cb {
                w_future[r] = scale;
                future_mask[r * cd..(r + 1) * cd].iter_mut().for_each(|v| *v = 1.0);
            }
        }
    }
    let konst = |g: &mut Graph, shape: Vec<usize>, data: Vec<f64>| -> Result<Var> { Ok(g.constant(Tensor::new(shape, data)?)) };
    let weighted_sum = |g: &mut Graph, x: Var, w: &[f64]| -> Result<Var> {
        let wv = g.constant(Tensor::new(vec![w.len(), 1], w.to_vec())?);
        let y = g.mul(x, wv)?;
        Ok(g.sum_all(y))
    };
    let hau = |g: &mut Graph, unc: Var, res: Var| -> Result<Var> {
        let e = g.neg_exp(unc);
        let y = g.mul(e, res)?;
        Ok(g.add(y, unc)?)
    };

    let target = konst(g, vec![rows, cd], p)?;
    let diff = g.sub(trace.mean, target)?;
    let kind = cfg.pointwise();
    let drau = match trace.beta {
        Some(beta) => {
            let xy = g.narrow(diff, 1, 0, 2)?;
            let z = g.narrow(diff, 1, 2, 1)?;
            let rxy = g.pointwise(xy, kind);
            let rxy = g.sum_lastdim(rxy);
            let rz = g.pointwise(z, kind);
            let hxy = hau(g, trace.alpha, rxy)?;
            let hz = hau(g, beta, rz)?;
            let a = weighted_sum(g, hxy, &w_row)?;
            let b = weighted_sum(g, hz, &depth_w)?;
            g.add(a, b)?
        }
        None => {
            let r = g.pointwise(diff, kind);
            let r = g.sum_lastdim(r);
            let h = hau(g, trace.alpha, r)?;
            weighted_sum(g, h, &w_row)?
        }
    };

    let step = konst(g, vec![rows, cd], step)?;
    let dv = g.sub(trace.velocity, step)?;
    let dv = g.square(dv);
    let dv = g.sum_lastdim(dv);
    let first = weighted_sum(g, dv, &w_row)?;

    let mask = konst(g, vec![rows, cd], future_mask)?;
    let mv = g.mul(trace.velocity, mask)?;
    let mv = g.reshape(mv, &[t, n * cd])?;
    let tril: Vec<f64> = (0..t).flat_map(|i| (0..t).map(move |j| if j <= i { 1.0 } else { 0.0 })).collect();
    let tril = konst(g, vec![t, t], tril)?;
    let cum = g.matmul(tril, mv)?;
    let cum = g.reshape(cum, &[rows, cd])?;
    let p_c = konst(g, vec![rows, cd], p_c)?;
    let warped = g.add(cum, p_c)?;
    let wd = g.sub(warped, trace.mean)?;
    let wd = g.square(wd);
    let wd = g.sum_lastdim(wd);
    let warp = weighted_sum(g, wd, &w_future)?;
    let warp = g.scale(warp, cfg.gamma);
    let velo = g.add(first, warp)?;

    let a = g.scale(drau, cfg.drau_weight);
    let b = g.scale(velo, cfg.velocity_weight);
    let total = g.add(a, b)?;
    Ok(LossVars { total, drau, velo })
}
