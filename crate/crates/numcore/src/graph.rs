//! Define-by-run computation graph with a single reverse sweep.
//!
//! Every operation appends a node to the [`Graph`]; a node only refers to
//! nodes created before it, so the node order is already topological and
//! [`Graph::backward`] walks it once from the loss down to the leaves.

use crate::error::{arg_err, shape_err, NumError, Result};
use crate::kernels::{self, col2im_add, gemm, im2col, ConvGeom, Strides};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Tanh,
    Softplus,
    Exp,
    Relu,
    /// `e^{-x}`
    NegExp,
    Square,
    /// Huber penalty with the given threshold: `x²/2` inside, `δ(|x| - δ/2)` outside.
    Huber(f64),
    #[cfg(test)]
    BrokenSquare,
}

impl Pointwise {
    fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Tanh => x.tanh(),
            Pointwise::Softplus => kernels::softplus(x),
            Pointwise::Exp => x.exp(),
            Pointwise::Relu => x.max(0.0),
            Pointwise::NegExp => (-x).exp(),
            Pointwise::Square => x * x,
            Pointwise::Huber(d) => {
                if x.abs() <= d {
                    0.5 * x * x
                } else {
                    d * (x.abs() - 0.5 * d)
                }
            }
            #[cfg(test)]
            Pointwise::BrokenSquare => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Pointwise::Tanh => 1.0 - y * y,
            Pointwise::Softplus => kernels::sigmoid(x),
            Pointwise::Exp => y,
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::NegExp => -y,
            Pointwise::Square => 2.0 * x,
            Pointwise::Huber(d) => {
                if x.abs() <= d {
                    x
                } else {
                    d * x.signum()
                }
            }
            #[cfg(test)]
            Pointwise::BrokenSquare => 2.1 * x,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Pointwise(Var, Pointwise),
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Gather { x: Var, index: Vec<Option<usize>> },
    Reshape(Var),
    Permute { x: Var, source: Vec<usize> },
    Conv2d { x: Var, kernel: Var, bias: Var, geom: ConvGeom },
    SumAll(Var),
    SumLast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires one.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over the leading axis: `[g, m, k] x [g, k, n]`, or
    /// `[g, m, k] x [g, n, k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err("bmm", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"));
        }
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let sbs = if transpose_b {
            Strides::transposed(k)
        } else {
            Strides::row_major(n)
        };
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                Strides::row_major(k),
                &bv[i * k * n..],
                sbs,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// Adds a vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return shape_err(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            );
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            add_into(row, &b);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn pointwise(&mut self, x: Var, kind: Pointwise) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Pointwise(x, kind), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Exp)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn neg_exp(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::NegExp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.pointwise(x, Pointwise::Square)
    }

    /// Layer normalization over the trailing axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return arg_err("layer_norm", format!("eps must be positive, got {eps}"));
        }
        let n = self.value(x).last_dim();
        if n == 0 || self.shape(gain) != [n] || self.shape(bias) != [n] {
            return shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            );
        }
        let xs = self.value(x);
        let rows = xs.numel() / n;
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![0.0; xs.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.numel()];
        for r in 0..rows {
            let row = &xs.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normalized[r * n + j] = xh;
                out[r * n + j] = xh * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the trailing axis (max-subtracted).
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return shape_err("softmax_lastdim", "trailing extent must be >= 1");
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Joins tensors along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return arg_err("concat", "no inputs"),
        };
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// The slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("narrow", format!("{start}+{len} on axis {axis} of {s:?}"));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        if self.shape(x).get(axis) != Some(&start) {
            return shape_err("split", format!("sizes {sizes:?} do not cover {:?}", self.shape(x)));
        }
        Ok(parts)
    }

    /// Picks flat elements of `x` into a tensor of `shape`; `None` yields 0.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() {
            return shape_err("gather", format!("{} indices for shape {shape:?}", index.len()));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return arg_err("gather", format!("index {bad} out of range for {n} elements"));
        }
        let src = self.value(x).data();
        let out = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, rg))
    }

    /// Row selection on a 2-D tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, rows: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err("gather_rows", format!("expected rank 2, got {s:?}"));
        }
        let d = s[1];
        if let Some(bad) = rows.iter().flatten().find(|&&r| r >= s[0]) {
            return arg_err("gather_rows", format!("row {bad} out of range for {s:?}"));
        }
        let index = rows
            .iter()
            .flat_map(|r| (0..d).map(move |j| r.map(|r| r * d + j)))
            .collect();
        self.gather(x, index, vec![rows.len(), d])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return arg_err("permute", format!("{perm:?} is not a permutation of {} axes", s.len()));
        }
        let rank = s.len();
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * s[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let n = self.value(x).numel();
        let mut source = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            source.push(idx.iter().zip(perm).map(|(i, &p)| i * in_strides[p]).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let src = self.value(x).data();
        let out = source.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, source }, rg))
    }

    /// 2-D convolution: `x [N, C, H, W]`, `kernel [O, C, KH, KW]`, `bias [O]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || self.shape(bias) != [sk[0]] {
            return shape_err(
                "conv2d",
                format!("x {sx:?}, kernel {sk:?}, bias {:?}", self.shape(bias)),
            );
        }
        if stride == 0 || sx[2] + 2 * pad < sk[2] || sx[3] + 2 * pad < sk[3] {
            return arg_err("conv2d", format!("stride {stride}, pad {pad} for {sx:?}"));
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sk[2],
            kernel_w: sk[3],
            stride,
            pad,
        };
        let (n, o) = (sx[0], sk[0]);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let img = geom.channels * geom.height * geom.width;
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; n * o * cols];
        let (xv, kv, bv) = (
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        for i in 0..n {
            im2col(&geom, &xv[i * img..(i + 1) * img], &mut col);
            let dst = &mut out[i * o * cols..(i + 1) * o * cols];
            for (c, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[c]);
            }
            gemm(o, rows, cols, kv, Strides::row_major(rows), &col, Strides::row_major(cols), 1.0, dst);
        }
        let shape = vec![n, o, geom.out_h(), geom.out_w()];
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums the trailing axis, keeping it with extent 1.
    pub fn sum_lastdim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut shape = t.shape().to_vec();
        let data: Vec<f64> = if n == 0 {
            vec![0.0; t.numel()]
        } else {
            t.data().chunks(n).map(|r| r.iter().sum()).collect()
        };
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => shape.push(1),
        }
        let rg = self.rg(&[x]);
        let out = Tensor::new(shape, data).expect("row sums");
        self.push(out, Op::SumLast(x), rg)
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Every node that requires a gradient receives one (zeros when the loss
    /// does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.numel() != 1 {
            return Err(NumError::NonScalarLoss(ln.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if ln.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let da = slot(grads, nodes, *a);
                    gemm(m, n, k, g, Strides::row_major(n), nodes[b.0].value.data(), Strides::transposed(n), 1.0, da);
                }
                if wants(*b) {
                    let db = slot(grads, nodes, *b);
                    gemm(k, m, n, nodes[a.0].value.data(), Strides::transposed(k), g, Strides::row_major(n), 1.0, db);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = nodes[a.0].value.shape();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let da = slot(grads, nodes, *a);
                    for t in 0..bt {
                        let gs = &g[t * m * n..];
                        let dst = &mut da[t * m * k..(t + 1) * m * k];
                        if *transpose_b {
                            // C = A Bᵀ, B: [n, k] -> dA = G B
                            gemm(m, n, k, gs, Strides::row_major(n), &bv[t * n * k..], Strides::row_major(k), 1.0, dst);
                        } else {
                            // B: [k, n] -> dA = G Bᵀ
                            gemm(m, n, k, gs, Strides::row_major(n), &bv[t * k * n..], Strides::transposed(n), 1.0, dst);
                        }
                    }
                }
                if wants(*b) {
                    let db = slot(grads, nodes, *b);
                    for t in 0..bt {
                        let gs = &g[t * m * n..];
                        let asl = &av[t * m * k..];
                        if *transpose_b {
                            // dB = Gᵀ A : [n, k]
                            let dst = &mut db[t * n * k..(t + 1) * n * k];
                            gemm(n, m, k, gs, Strides::transposed(n), asl, Strides::row_major(k), 1.0, dst);
                        } else {
                            // dB = Aᵀ G : [k, n]
                            let dst = &mut db[t * k * n..(t + 1) * k * n];
                            gemm(k, m, n, asl, Strides::transposed(k), gs, Strides::row_major(n), 1.0, dst);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if wants(*b) {
                    add_into(slot(grads, nodes, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if wants(*b) {
                    slot(grads, nodes, *b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    slot(grads, nodes, *a).iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (gi, y))| *d += gi * y);
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    slot(grads, nodes, *b).iter_mut().zip(g.iter().zip(av)).for_each(|(d, (gi, x))| *d += gi * x);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    add_into(slot(grads, nodes, *x), g);
                }
                if wants(*bias) {
                    let db = slot(grads, nodes, *bias);
                    let n = db.len();
                    for row in g.chunks(n.max(1)) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
                }
            }
            Op::Pointwise(x, kind) => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let yv = node.value.data();
                    let dx = slot(grads, nodes, *x);
                    for j in 0..g.len() {
                        dx[j] += g[j] * kind.derivative(xv[j], yv[j]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = nodes[gain.0].value.numel();
                let gv = nodes[gain.0].value.data();
                if wants(*gain) {
                    let dg = slot(grads, nodes, *gain);
                    for (gr, xr) in g.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = slot(grads, nodes, *bias);
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                }
                if wants(*x) {
                    let dx = slot(grads, nodes, *x);
                    let nf = n as f64;
                    let mut dxh = vec![0.0; n];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &normalized[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            dxh[j] = gr[j] * gv[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xr[j];
                        }
                        let dr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dr[j] += is / nf * (nf * dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let dx = slot(grads, nodes, *x);
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].value.shape()[*axis] * inner;
                    if wants(*v) {
                        let dv = slot(grads, nodes, *v);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            add_into(&mut dv[o * len..(o + 1) * len], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if wants(*x) {
                    let s = nodes[x.0].value.shape();
                    let (outer, inner) = outer_inner(s, *axis);
                    let len = node.value.shape()[*axis] * inner;
                    let dx = slot(grads, nodes, *x);
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        add_into(&mut dx[base..base + len], &g[o * len..(o + 1) * len]);
                    }
                }
            }
            Op::Gather { x, index } => {
                if wants(*x) {
                    let dx = slot(grads, nodes, *x);
                    for (gi, idx) in g.iter().zip(index) {
                        if let Some(j) = idx {
                            dx[*j] += gi;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(slot(grads, nodes, *x), g);
                }
            }
            Op::Permute { x, source } => {
                if wants(*x) {
                    let dx = slot(grads, nodes, *x);
                    for (gi, &j) in g.iter().zip(source) {
                        dx[j] += gi;
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let n = nodes[x.0].value.shape()[0];
                let o = nodes[kernel.0].value.shape()[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let xv = nodes[x.0].value.data();
                let kv = nodes[kernel.0].value.data();
                if wants(*bias) {
                    let db = slot(grads, nodes, *bias);
                    for (c, chunk) in g.chunks(cols).enumerate() {
                        db[c % o] += chunk.iter().sum::<f64>();
                    }
                }
                let mut col = vec![0.0; rows * cols];
                if wants(*kernel) {
                    let dk = slot(grads, nodes, *kernel);
                    for s in 0..n {
                        im2col(geom, &xv[s * img..(s + 1) * img], &mut col);
                        let gs = &g[s * o * cols..(s + 1) * o * cols];
                        gemm(o, cols, rows, gs, Strides::row_major(cols), &col, Strides::transposed(cols), 1.0, dk);
                    }
                }
                if wants(*x) {
                    let dx = slot(grads, nodes, *x);
                    for s in 0..n {
                        let gs = &g[s * o * cols..(s + 1) * o * cols];
                        gemm(rows, o, cols, kv, Strides::transposed(rows), gs, Strides::row_major(cols), 0.0, &mut col);
                        col2im_add(geom, &col, &mut dx[s * img..(s + 1) * img]);
                    }
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    let g0 = g[0];
                    slot(grads, nodes, *x).iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::SumLast(x) => {
                if wants(*x) {
                    let n = nodes[x.0].value.last_dim();
                    let dx = slot(grads, nodes, *x);
                    if n > 0 {
                        for (dr, gi) in dx.chunks_mut(n).zip(g) {
                            dr.iter_mut().for_each(|d| *d += gi);
                        }
                    }
                }
            }
        }
    }
}
