//! Trajectory annotation: clip bounds, forward/backward track fusion and
//! least-squares depth repair.

use nalgebra::{Matrix5, Vector5};

use crate::datagen::{global_points, TrajectorySample};
use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// Fewest valid depth samples accepted by [`fit_depth_model`].
pub const MIN_VALID_DEPTHS: usize = 10;

/// Default floor `c` of the fusion weight.
pub const DEFAULT_FUSION_FLOOR: f64 = 0.3;

const RIDGE: f64 = 1e-9;
const FREQ_GRID: usize = 200;
const FREQ_MIN: f64 = 1e-3;
const GOLDEN_ITERS: usize = 60;

/// Raw per-clip measurements before fusion and repair.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrack {
    pub forward: Vec<Pixel>,
    pub backward: Vec<Pixel>,
    pub depths: Vec<f64>,
    pub valid: Vec<bool>,
    /// Manually annotated `(start, end)`.
    pub manual_bounds: (usize, usize),
    /// First and last frame with a detected hand landmark.
    pub landmark_bounds: (usize, usize),
}

impl RawTrack {
    pub fn validate(&self) -> Result<()> {
        let n = self.forward.len();
        if self.backward.len() != n || self.depths.len() != n || self.valid.len() != n {
            return Err(Error::LengthMismatch(format!(
                "forward {n}, backward {}, depths {}, valid {}",
                self.backward.len(),
                self.depths.len(),
                self.valid.len()
            )));
        }
        for (s, e) in [self.manual_bounds, self.landmark_bounds] {
            if s > e || e >= n.max(1) {
                return Err(Error::Config(format!("bounds ({s}, {e}) outside a {n}-frame track")));
            }
        }
        Ok(())
    }
}

/// Intersects the manual clip with the landmark span.
pub fn clip_bounds(manual_start: usize, manual_end: usize, landmark_start: usize, landmark_end: usize) -> Result<(usize, usize)> {
    let start = manual_start.max(landmark_start);
    let end = manual_end.min(landmark_end);
    if start > end {
        return Err(Error::EmptyClip { start, end });
    }
    Ok((start, end))
}

/// Weight of the forward track at 1-based step `t` of a `horizon`-step clip:
/// `c + (1 - c) / (1 + exp(t - T/2))`.
pub fn fusion_weight(t: usize, horizon: usize, floor: f64) -> f64 {
    floor + (1.0 - floor) / (1.0 + (t as f64 - horizon as f64 / 2.0).exp())
}

/// Temporally weighted blend of a forward and a backward 2D track (pixels).
pub fn fuse_trajectories(forward: &[Pixel], backward: &[Pixel], floor: f64) -> Result<Vec<Pixel>> {
    if forward.len() != backward.len() {
        return Err(Error::LengthMismatch(format!(
            "forward {} vs backward {}",
            forward.len(),
            backward.len()
        )));
    }
    if !(0.0..1.0).contains(&floor) {
        return Err(Error::Config(format!("fusion floor must be in [0, 1), got {floor}")));
    }
    let horizon = forward.len();
    Ok(forward
        .iter()
        .zip(backward)
        .enumerate()
        .map(|(i, (f, b))| {
            let w = fusion_weight(i + 1, horizon, floor);
            [w * f[0] + (1.0 - w) * b[0], w * f[1] + (1.0 - w) * b[1]]
        })
        .collect())
}

/// `z(u) = a1 u³ + a2 u² + a3 u + a4 + a5 sin(a6 u)` over normalized time
/// `u = (t - t0) / span`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthModel {
    pub coeffs: [f64; 6],
    pub t0: f64,
    pub span: f64,
}

impl DepthModel {
    pub fn normalized_time(&self, t: f64) -> f64 {
        (t - self.t0) / self.span
    }

    /// Evaluates at normalized time `u`.
    pub fn eval_normalized(&self, u: f64) -> f64 {
        let a = &self.coeffs;
        a[0] * u * u * u + a[1] * u * u + a[2] * u + a[3] + a[4] * (a[5] * u).sin()
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_normalized(self.normalized_time(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthFit {
    pub model: DepthModel,
    /// Root-mean-square residual over the valid samples.
    pub rmse: f64,
}

fn basis(u: f64, freq: f64) -> [f64; 5] {
    [u * u * u, u * u, u, 1.0, (freq * u).sin()]
}

/// Exact damped least squares for the five linear coefficients at `freq`.
/// Returns the coefficients and the sum of squared residuals.
fn solve_linear(us: &[f64], zs: &[f64], freq: f64) -> ([f64; 5], f64) {
    let mut ata = Matrix5::<f64>::zeros();
    let mut atz = Vector5::<f64>::zeros();
    for (&u, &z) in us.iter().zip(zs) {
        let b = Vector5::from(basis(u, freq));
        ata += b * b.transpose();
        atz += b * z;
    }
    for i in 0..5 {
        ata[(i, i)] += RIDGE;
    }
    let c = match ata.cholesky() {
        Some(ch) => ch.solve(&atz),
        None => ata.lu().solve(&atz).unwrap_or_else(Vector5::zeros),
    };
    let coeffs = [c[0], c[1], c[2], c[3], c[4]];
    let sse = us
        .iter()
        .zip(zs)
        .map(|(&u, &z)| {
            let pred: f64 = basis(u, freq).iter().zip(&coeffs).map(|(b, c)| b * c).sum();
            (z - pred) * (z - pred)
        })
        .sum();
    (coeffs, sse)
}

/// Sum of squared residuals of `model` over the valid samples.
pub fn depth_objective(model: &DepthModel, times: &[f64], depths: &[f64], valid: &[bool]) -> f64 {
    times
        .iter()
        .zip(depths)
        .zip(valid)
        .filter(|(_, ok)| **ok)
        .map(|((&t, &z), _)| (z - model.eval(t)).powi(2))
        .sum()
}

/// Fits the cubic-plus-sine depth model to the valid samples.
///
/// The frequency is scanned on a log grid up to the Nyquist rate of the
/// normalized clip and refined by golden-section search around the best
/// cell; the remaining coefficients are solved exactly per frequency.
pub fn fit_depth_model(times: &[f64], depths: &[f64], valid: &[bool]) -> Result<DepthFit> {
    if times.len() != depths.len() || times.len() != valid.len() {
        return Err(Error::LengthMismatch(format!(
            "times {}, depths {}, valid {}",
            times.len(),
            depths.len(),
            valid.len()
        )));
    }
    let found = valid.iter().filter(|v| **v).count();
    if found < MIN_VALID_DEPTHS {
        return Err(Error::InsufficientData {
            found,
            required: MIN_VALID_DEPTHS,
        });
    }
    let t0 = times.iter().copied().fold(f64::INFINITY, f64::min);
    let t1 = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if t1 > t0 { t1 - t0 } else { 1.0 };
    let (us, zs): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(depths)
        .zip(valid)
        .filter(|(_, ok)| **ok)
        .map(|((&t, &z), _)| ((t - t0) / span, z))
        .unzip();

    let freq_max = std::f64::consts::PI * (times.len().saturating_sub(1)).max(1) as f64;
    let ratio = (freq_max / FREQ_MIN).ln();
    let grid: Vec<f64> = (0..FREQ_GRID)
        .map(|i| FREQ_MIN * (ratio * i as f64 / (FREQ_GRID - 1) as f64).exp())
        .collect();
    let sse_at = |f: f64| solve_linear(&us, &zs, f).1;
    let scores: Vec<f64> = grid.iter().map(|&f| sse_at(f)).collect();
    let best = (0..FREQ_GRID)
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]))
        .expect("non-empty grid");

    // golden-section in log-frequency over the neighbouring cells
    let mut lo = grid[best.saturating_sub(1)].ln();
    let mut hi = grid[(best + 1).min(FREQ_GRID - 1)].ln();
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (sse_at(x1.exp()), sse_at(x2.exp()));
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = sse_at(x1.exp());
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = sse_at(x2.exp());
        }
    }
    let mut freq = grid[best];
    let mut sse = scores[best];
    for (x, f) in [(x1, f1), (x2, f2)] {
        if f < sse {
            sse = f;
            freq = x.exp();
        }
    }
    let (c, sse) = solve_linear(&us, &zs, freq);
    Ok(DepthFit {
        model: DepthModel {
            coeffs: [c[0], c[1], c[2], c[3], c[4], freq],
            t0,
            span,
        },
        rmse: (sse / us.len() as f64).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRepair {
    pub depths: Vec<f64>,
    pub n_valid: usize,
    pub n_repaired: usize,
    pub fit: Option<DepthFit>,
}

/// Replaces invalid depths by the fitted model; valid entries are returned
/// untouched. Frame indices serve as time stamps.
pub fn repair_depths(depths: &[f64], valid: &[bool]) -> Result<DepthRepair> {
    if depths.len() != valid.len() {
        return Err(Error::LengthMismatch(format!("depths {} vs valid {}", depths.len(), valid.len())));
    }
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == depths.len() {
        return Ok(DepthRepair {
            depths: depths.to_vec(),
            n_valid,
            n_repaired: 0,
            fit: None,
        });
    }
    let times: Vec<f64> = (0..depths.len()).map(|i| i as f64).collect();
    let fit = fit_depth_model(&times, depths, valid)?;
    let repaired = depths
        .iter()
        .zip(valid)
        .zip(&times)
        .map(|((&z, &ok), &t)| if ok { z } else { fit.model.eval(t) })
        .collect();
    Ok(DepthRepair {
        depths: repaired,
        n_valid,
        n_repaired: depths.len() - n_valid,
        fit: Some(fit),
    })
}

pub fn repair_depth(track: &RawTrack) -> Result<DepthRepair> {
    track.validate()?;
    repair_depths(&track.depths, &track.valid)
}

/// Repairs the invalid depths of a sample. Each invalid step stores its
/// viewing ray, which is rescaled to the fitted depth.
pub fn repair_sample(sample: &TrajectorySample) -> Result<(TrajectorySample, DepthRepair)> {
    sample.validate()?;
    let depths: Vec<f64> = sample.points_local.iter().map(|p| p[2]).collect();
    let report = repair_depths(&depths, &sample.valid_depth)?;
    let mut out = sample.clone();
    for (t, p) in out.points_local.iter_mut().enumerate() {
        if sample.valid_depth[t] {
            continue;
        }
        let z = report.depths[t];
        if !(z > 0.0) {
            return Err(Error::BehindCamera(z));
        }
        *p = [p[0] * z, p[1] * z, z];
    }
    out.valid_depth.iter_mut().for_each(|v| *v = true);
    out.points_global = global_points(&out.poses, &out.points_local)?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_bounds_examples() {
        assert_eq!(clip_bounds(5, 50, 8, 60).unwrap(), (8, 50));
        assert_eq!(clip_bounds(5, 50, 5, 50).unwrap(), (5, 50));
        assert!(matches!(clip_bounds(5, 10, 20, 30), Err(Error::EmptyClip { .. })));
    }

    #[test]
    fn fusion_weight_examples() {
        assert!((fusion_weight(20, 40, 0.3) - 0.65).abs() < 1e-15);
        assert!((fusion_weight(1, 40, 0.3) - 1.0).abs() < 1e-8);
        assert!((fusion_weight(40, 40, 0.3) - 0.3).abs() < 1e-8);
    }

    #[test]
    fn fusion_of_equal_tracks_is_identity() {
        let f: Vec<Pixel> = (0..12).map(|i| [i as f64 * 3.0, 100.0 - i as f64]).collect();
        let fused = fuse_trajectories(&f, &f, 0.3).unwrap();
        for (a, b) in fused.iter().zip(&f) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_midpoint_example_and_errors() {
        let f = vec![[0.0, 0.0]; 4];
        let b = vec![[1.0, 1.0]; 4];
        let fused = fuse_trajectories(&f, &b, 0.3).unwrap();
        // t = T/2 = 2 is index 1
        assert!((fused[1][0] - 0.35).abs() < 1e-15 && (fused[1][1] - 0.35).abs() < 1e-15);
        assert!(fuse_trajectories(&f, &b[..3], 0.3).is_err());
        assert!(fuse_trajectories(&f, &b, 1.0).is_err());
    }

    #[test]
    fn constant_depth_is_recovered() {
        let t: Vec<f64> = (0..12).map(f64::from).collect();
        let z = vec![0.5; 12];
        let fit = fit_depth_model(&t, &z, &[true; 12]).unwrap();
        for i in 0..=110 {
            assert!((fit.model.eval(i as f64 / 10.0) - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_points_are_rejected() {
        let t: Vec<f64> = (0..8).map(f64::from).collect();
        let err = fit_depth_model(&t, &[0.4; 8], &[true; 8]).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { found: 8, required: 10 }));
        let mut valid = vec![true; 20];
        valid[..11].iter_mut().for_each(|v| *v = false);
        assert!(fit_depth_model(&(0..20).map(f64::from).collect::<Vec<_>>(), &[0.4; 20], &valid).is_err());
    }

    #[test]
    fn repair_without_gaps_is_identity() {
        let z: Vec<f64> = (0..15).map(|i| 0.4 + 0.01 * i as f64).collect();
        let out = repair_depths(&z, &[true; 15]).unwrap();
        assert_eq!(out.depths, z);
        assert_eq!(out.n_repaired, 0);
    }

    #[test]
    fn zeroed_constant_entries_are_refilled() {
        let mut z = vec![0.5; 16];
        let mut valid = vec![true; 16];
        for i in [2, 7, 13] {
            z[i] = 0.0;
            valid[i] = false;
        }
        let out = repair_depths(&z, &valid).unwrap();
        assert_eq!(out.n_repaired, 3);
        for i in [2, 7, 13] {
            assert!((out.depths[i] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn raw_track_validation() {
        let track = RawTrack {
            forward: vec![[0.0; 2]; 12],
            backward: vec![[0.0; 2]; 11],
            depths: vec![0.5; 12],
            valid: vec![true; 12],
            manual_bounds: (0, 11),
            landmark_bounds: (0, 11),
        };
        assert!(matches!(repair_depth(&track), Err(Error::LengthMismatch(_))));
    }
}
