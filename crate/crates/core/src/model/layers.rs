//! Graph building blocks shared by the network stages.

use usst_numcore::{Graph, Tensor, Var, MASKED_LOGIT};

use super::params::{Bound, Init, ParamStore};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Graph plus bound parameters.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    bound: &'a Bound,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, bound: &'a Bound) -> Self {
        Self { g, store, bound }
    }

    pub fn w(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.bound.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.w(&format!("{name}.w"))?;
        let b = self.w(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_bias(y, b)?)
    }

    pub fn project(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.w(&format!("{name}.w"))?;
        Ok(self.g.matmul(x, w)?)
    }

    /// `l1(tanh(l0(x)))`
    pub fn mlp2(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.l0"))?;
        let h = self.g.tanh(h);
        self.linear(h, &format!("{name}.l1"))
    }

    pub fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gain = self.w(&format!("{name}.g"))?;
        let bias = self.w(&format!("{name}.b"))?;
        Ok(self.g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    /// `[n * len, d]` rows grouped per sequence into `[n * heads, len, d / heads]`.
    pub fn split_heads(&mut self, x: Var, n: usize, len: usize, heads: usize) -> Result<Var> {
        let d = self.g.shape(x)[1];
        let x = self.g.reshape(x, &[n, len, heads, d / heads])?;
        let x = self.g.permute(x, &[0, 2, 1, 3])?;
        Ok(self.g.reshape(x, &[n * heads, len, d / heads])?)
    }

    pub fn merge_heads(&mut self, x: Var, n: usize, len: usize, heads: usize) -> Result<Var> {
        let dh = self.g.shape(x)[2];
        let x = self.g.reshape(x, &[n, heads, len, dh])?;
        let x = self.g.permute(x, &[0, 2, 1, 3])?;
        Ok(self.g.reshape(x, &[n * len, heads * dh])?)
    }

    /// Multi-head self-attention over `n` sequences of `len` rows each.
    pub fn self_attention(&mut self, x: Var, name: &str, n: usize, len: usize, heads: usize, mask: Option<Var>) -> Result<Var> {
        let q = self.linear(x, &format!("{name}.q"))?;
        let k = self.project(x, &format!("{name}.k"))?;
        let v = self.linear(x, &format!("{name}.v"))?;
        let (q, k, v) = (
            self.split_heads(q, n, len, heads)?,
            self.split_heads(k, n, len, heads)?,
            self.split_heads(v, n, len, heads)?,
        );
        let a = masked_attention(self.g, q, k, v, mask)?;
        let a = self.merge_heads(a, n, len, heads)?;
        self.linear(a, &format!("{name}.o"))
    }
}

/// Scaled dot-product attention on `[groups, rows, d]` operands with an
/// optional additive logit mask of shape `[groups, q_rows, k_rows]`.
pub fn masked_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let d = g.shape(q)[2];
    let logits = g.bmm(q, k, true)?;
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(m) = mask {
        logits = g.add(logits, m)?;
    }
    let att = g.softmax_lastdim(logits)?;
    Ok(g.bmm(att, v, false)?)
}

/// Additive mask for `n` sequences of length `len`: query row `i` or key
/// column `j` at or past the sequence's observed count gets [`MASKED_LOGIT`]
/// (twice when both are), repeated for each head.
pub fn attention_mask(observed: &[usize], len: usize, heads: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(observed.len() * heads * len * len);
    for &c in observed {
        if c == 0 || c > len {
            return Err(Error::Config(format!("observed count {c} outside 1..={len}")));
        }
        for _ in 0..heads {
            for i in 0..len {
                for j in 0..len {
                    let mut m = 0.0;
                    if i >= c {
                        m += MASKED_LOGIT;
                    }
                    if j >= c {
                        m += MASKED_LOGIT;
                    }
                    data.push(m);
                }
            }
        }
    }
    Ok(Tensor::new(vec![observed.len() * heads, len, len], data)?)
}

/// Key-only mask of shape `[n * heads, 1, len]`.
pub fn key_mask(observed: &[usize], len: usize, heads: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(observed.len() * heads * len);
    for &c in observed {
        for _ in 0..heads {
            data.extend((0..len).map(|j| if j >= c { MASKED_LOGIT } else { 0.0 }));
        }
    }
    Ok(Tensor::new(vec![observed.len() * heads, 1, len], data)?)
}

/// Sinusoidal encoding of 1-based position `t`.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = t as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Positional rows for `n` sequences of `len` steps, batch-major.
pub fn pe_rows(n: usize, len: usize, d: usize) -> Tensor {
    let one: Vec<f64> = (1..=len).flat_map(|t| positional_encoding(t, d)).collect();
    let data = (0..n).flat_map(|_| one.iter().copied()).collect();
    Tensor::new(vec![n * len, d], data).expect("pe shape")
}

// Parameter registration helpers; keep in step with the closed-form count.

pub(crate) fn add_linear(s: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    s.insert(format!("{name}.w"), init.glorot(fan_in, fan_out, gain), false);
    s.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]), false);
}

pub(crate) fn add_mlp2(s: &mut ParamStore, init: &mut Init, name: &str, i: usize, h: usize, o: usize, gain: f64) {
    add_linear(s, init, &format!("{name}.l0"), i, h, 1.0);
    add_linear(s, init, &format!("{name}.l1"), h, o, gain);
}

pub(crate) fn add_layer_norm(s: &mut ParamStore, name: &str, d: usize) {
    s.insert(format!("{name}.g"), Tensor::full(vec![d], 1.0), false);
    s.insert(format!("{name}.b"), Tensor::zeros(vec![d]), false);
}

pub(crate) fn add_attention(s: &mut ParamStore, init: &mut Init, name: &str, d_q: usize, d_kv: usize, d: usize) {
    add_linear(s, init, &format!("{name}.q"), d_q, d, 1.0);
    // softmax is invariant to a key bias, so keys have none
    s.insert(format!("{name}.k.w"), init.glorot(d_kv, d, 1.0), false);
    add_linear(s, init, &format!("{name}.v"), d_kv, d, 1.0);
    add_linear(s, init, &format!("{name}.o"), d, d, 1.0);
}
