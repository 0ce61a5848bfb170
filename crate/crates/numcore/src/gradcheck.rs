//! Finite-difference audit of analytic gradients (fourth-order central stencil).

use crate::error::{arg_err, NumError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Caps the number of probed elements per input (evenly strided).
    pub max_probes_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            max_probes_per_input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub probed: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| NumError::NonScalarLoss(g.shape(out).to_vec()))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// fourth-order central differences, element by element.
///
/// An element passes when its relative error is strictly below the
/// tolerance, so a tolerance of zero always fails.
pub fn check_gradients<F>(f: F, inputs: &[(String, Tensor)], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return arg_err("check_gradients", format!("step must be positive, got {}", cfg.step));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("param leaf has a gradient").to_vec();
        let n = t.numel();
        let stride = match cfg.max_probes_per_input {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut worst = (0.0f64, 0usize);
        let mut probed = 0;
        for idx in (0..n).step_by(stride) {
            let orig = values[k].data()[idx];
            let mut at = |offset: f64| -> Result<f64> {
                values[k].data_mut()[idx] = orig + offset;
                eval(&f, &values)
            };
            let h = cfg.step;
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            values[k].data_mut()[idx] = orig;
            let err = relative_error(analytic[idx], numeric);
            if err > worst.0 || probed == 0 {
                worst = (err, idx);
            }
            probed += 1;
        }
        reports.push(InputReport {
            name: name.clone(),
            probed,
            max_rel_err: worst.0,
            worst_index: worst.1,
            passed: probed == 0 || worst.0 < cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        inputs: reports,
    })
}
