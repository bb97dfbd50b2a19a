//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted and the backward pass is a single reverse
//! sweep. The operator set is the closure the pipeline needs and nothing
//! more: there is no general broadcasting.

mod gradcheck;

use std::sync::Arc;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse correlation coefficients for one kernel-point convolution.
///
/// For every query, `offsets[q]..offsets[q + 1]` indexes its (support,
/// coefficients) entries; each entry holds `kernel` coefficients.
#[derive(Clone, Debug)]
pub struct CorrelationPlan {
    pub queries: usize,
    pub supports: usize,
    pub kernel: usize,
    pub offsets: Vec<usize>,
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Concat(Vec<Var>, usize),
    Gather(Var, Arc<[usize]>),
    ScatterSum(Var, Arc<[usize]>),
    L2Normalize { x: Var, axis: usize, eps: f64 },
    Softmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Arc<[usize]>, ignore: usize, count: usize },
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Norm(Var),
    Max { x: Var, arg: usize },
    Normalize { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Correlate { features: Var, plan: Arc<CorrelationPlan> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode gradients indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Execution tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
}

/// Outer × lane × inner decomposition of a reduction axis.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (outer, len, inner) = lanes(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, len, inner);
        }
    }
}

fn transpose_raw(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant input; gradients are not tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked (e.g. descriptors fed into a loss).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Bind a trainable parameter; its gradient is collected by
    /// [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bindings.push((v, id));
        v
    }

    /// Bind a parameter as a frozen constant.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub(crate) fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    fn expect_rank(&self, v: Var, rank: usize, op: &str) -> Result<()> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::dim(format!("{op} expects rank {rank}, got shape {s:?}")));
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank(a, 2, "matmul")?;
        self.expect_rank(b, 2, "matmul")?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions {k} and {k2} disagree")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs, "matmul")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Add a length-C bias to every row of an N×C matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.expect_rank(x, 2, "add_bias")?;
        let c = self.shape(x)[1];
        if self.value(bias).len() != c {
            return Err(Error::dim(format!(
                "add_bias: bias of {} values for {c} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        self.push(t, Op::AddBias(x, bias), needs, "add_bias")
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        self.push(t, op, needs, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), "add_scalar", |v| v + c)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map(x, Op::LeakyRelu(x, slope), "leaky_relu", |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    /// Concatenate along axis 0 (any rank, equal trailing dims) or axis 1
    /// (rank 2, equal row counts).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let needs = xs.iter().any(|&v| self.needs(v));
        match axis {
            0 => {
                let trailing = self.shape(first)[1..].to_vec();
                let mut rows = 0;
                let mut data = Vec::new();
                for &v in xs {
                    if self.shape(v)[1..] != trailing[..] {
                        return Err(Error::dim(format!(
                            "concat axis 0: trailing dims {:?} vs {trailing:?}",
                            &self.shape(v)[1..]
                        )));
                    }
                    rows += self.shape(v)[0];
                    data.extend_from_slice(self.value(v).data());
                }
                let mut shape = vec![rows];
                shape.extend(trailing);
                let t = Tensor::new(shape, data)?;
                self.push(t, Op::Concat(xs.to_vec(), 0), needs, "concat")
            }
            1 => {
                let n = self.shape(first)[0];
                let mut widths = Vec::with_capacity(xs.len());
                for &v in xs {
                    self.expect_rank(v, 2, "concat axis 1")?;
                    if self.shape(v)[0] != n {
                        return Err(Error::dim(format!(
                            "concat axis 1: row counts {} vs {n}",
                            self.shape(v)[0]
                        )));
                    }
                    widths.push(self.shape(v)[1]);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(n * total);
                for i in 0..n {
                    for (&v, &w) in xs.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(v).data()[i * w..(i + 1) * w]);
                    }
                }
                let t = Tensor::new(vec![n, total], data)?;
                self.push(t, Op::Concat(xs.to_vec(), 1), needs, "concat")
            }
            _ => Err(Error::dim(format!("concat axis {axis} unsupported"))),
        }
    }

    /// Select rows by index (rows may repeat).
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let rows = self.shape(x)[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("gather index {bad} out of range for {rows} rows")));
        }
        if index.is_empty() {
            return Err(Error::dim("gather with empty index"));
        }
        let w = self.value(x).row_len();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push(t, Op::Gather(x, index.into()), needs, "gather")
    }

    /// Sum row `i` of `x` into output row `index[i]`; the adjoint of
    /// [`Graph::gather`].
    pub fn scatter_sum(&mut self, x: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        if index.len() != self.shape(x)[0] {
            return Err(Error::dim(format!(
                "scatter_sum: {} indices for {} rows",
                index.len(),
                self.shape(x)[0]
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Index(format!("scatter index {bad} out of range for {out_rows} rows")));
        }
        let w = self.value(x).row_len();
        let mut data = vec![0.0; out_rows * w];
        let src = self.value(x).data();
        for (r, &i) in index.iter().enumerate() {
            for (o, s) in data[i * w..(i + 1) * w].iter_mut().zip(&src[r * w..(r + 1) * w]) {
                *o += s;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = out_rows;
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push(t, Op::ScatterSum(x, index.into()), needs, "scatter_sum")
    }

    /// `x / sqrt(Σx² + eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("l2_normalize axis {axis} for shape {shape:?}")));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |start, len, stride| {
            let ss: f64 = (0..len).map(|i| src[start + i * stride].powi(2)).sum();
            let n = (ss + eps).sqrt();
            for i in 0..len {
                data[start + i * stride] = src[start + i * stride] / n;
            }
        });
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push(t, Op::L2Normalize { x, axis, eps }, needs, "l2_normalize")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |start, len, stride| {
            softmax_lane(src, &mut data, start, len, stride);
        });
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push(t, Op::Softmax { x, axis }, needs, "softmax")
    }

    /// Mean cross-entropy of N×C logits against labels, skipping rows whose
    /// label equals `ignore_index`. Zero when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore_index: usize) -> Result<Var> {
        self.expect_rank(logits, 2, "cross_entropy")?;
        let (n, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != n {
            return Err(Error::dim(format!("cross_entropy: {} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c && l != ignore_index) {
            return Err(Error::Index(format!("label {bad} outside [0, {c})")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            softmax_lane(src, &mut probs, i * c, c, 1);
            let l = labels[i];
            if l == ignore_index {
                continue;
            }
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, labels: labels.into(), ignore: ignore_index, count },
            needs,
            "cross_entropy",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.expect_rank(x, 2, "transpose")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let data = transpose_raw(self.value(x).data(), r, c);
        let t = Tensor::new(vec![c, r], data)?;
        let needs = self.needs(x);
        self.push(t, Op::Transpose(x), needs, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        self.push(t, Op::Reshape(x), needs, "reshape")
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        self.expect_rank(x, 2, "slice_cols")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        if width == 0 || start + width > c {
            return Err(Error::dim(format!("slice_cols {start}+{width} of {c} columns")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let t = Tensor::new(vec![r, width], data)?;
        let needs = self.needs(x);
        self.push(t, Op::SliceCols { x, start }, needs, "slice_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs, "sum")
    }

    /// Euclidean norm of all values; the subgradient at zero is zero.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).l2_norm();
        let needs = self.needs(x);
        self.push(Tensor::scalar(n), Op::Norm(x), needs, "norm")
    }

    /// Maximum over all values; the gradient routes to the first maximal entry.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data();
        let mut arg = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[arg] {
                arg = i;
            }
        }
        let m = data[arg];
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Max { x, arg }, needs, "max")
    }

    /// Per-channel normalization of an N×C matrix with batch statistics.
    /// Returns the output and the (mean, biased variance) used.
    pub fn normalize_batch(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.expect_rank(x, 2, "normalize_batch")?;
        let (n, c) = (self.shape(x)[0], self.shape(x)[1]);
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in src.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let out = self.normalize_with(x, gamma, beta, mean.clone(), var.clone(), eps, true)?;
        Ok((out, mean, var))
    }

    /// Per-channel normalization with fixed (running) statistics.
    pub fn normalize_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.expect_rank(x, 2, "normalize_frozen")?;
        self.normalize_with(x, gamma, beta, mean.to_vec(), var.to_vec(), eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        batch: bool,
    ) -> Result<Var> {
        let c = self.shape(x)[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c || mean.len() != c || var.len() != c {
            return Err(Error::dim(format!("normalize: channel count {c} mismatch")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for j in 0..c {
                row[j] = g[j] * (row[j] - mean[j]) * inv_std[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(t, Op::Normalize { x, gamma, beta, mean, inv_std, batch }, needs, "normalize")
    }

    /// Apply a correlation plan to M×C support features, producing an
    /// N×(K·C) matrix of kernel-point aggregated features.
    pub fn correlate(&mut self, features: Var, plan: Arc<CorrelationPlan>) -> Result<Var> {
        self.expect_rank(features, 2, "correlate")?;
        let (m, c) = (self.shape(features)[0], self.shape(features)[1]);
        if m != plan.supports {
            return Err(Error::dim(format!(
                "correlate: plan built for {} supports, features have {m} rows",
                plan.supports
            )));
        }
        let k = plan.kernel;
        let f = self.value(features).data();
        let mut out = vec![0.0; plan.queries * k * c];
        for q in 0..plan.queries {
            let dst = &mut out[q * k * c..(q + 1) * k * c];
            for e in plan.offsets[q]..plan.offsets[q + 1] {
                let s = plan.support[e];
                let feat = &f[s * c..(s + 1) * c];
                for (kk, &w) in plan.weights[e * k..(e + 1) * k].iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (o, v) in dst[kk * c..(kk + 1) * c].iter_mut().zip(feat) {
                        *o += w * v;
                    }
                }
            }
        }
        let t = Tensor::new(vec![plan.queries, k * c], out)?;
        let needs = self.needs(features);
        self.push(t, Op::Correlate { features, plan }, needs, "correlate")
    }

    /// Backward pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        self.backward_with(out, Tensor::full(self.shape(out), 1.0))
    }

    /// Backward pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::dim(format!(
                "seed shape {:?} differs from output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, d) in t.data_mut().iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), delta).expect("gradient shape"));
                }
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // ga = g · bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm_strided(gd, false, self.value(*b).data(), true, &mut ga, m, n, k, 0.0);
                    acc(*a, ga);
                }
                if self.needs(*b) {
                    // gb = aᵀ · g
                    let mut gb = vec![0.0; k * n];
                    gemm_strided(self.value(*a).data(), true, gd, false, &mut gb, k, m, n, 0.0);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(x, bias) => {
                acc(*x, gd.to_vec());
                let c = self.value(*bias).len();
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*bias, gb);
            }
            Op::Scale(x, c) => acc(*x, gd.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => acc(*x, gd.to_vec()),
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                acc(*x, gd.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { g * slope }).collect());
            }
            Op::Concat(xs, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for v in xs {
                        let len = self.value(*v).len();
                        acc(*v, gd[offset..offset + len].to_vec());
                        offset += len;
                    }
                } else {
                    let n = self.shape(xs[0])[0];
                    let total = node.value.shape()[1];
                    let mut col = 0;
                    for v in xs {
                        let w = self.shape(*v)[1];
                        let mut part = Vec::with_capacity(n * w);
                        for i in 0..n {
                            part.extend_from_slice(&gd[i * total + col..i * total + col + w]);
                        }
                        acc(*v, part);
                        col += w;
                    }
                }
            }
            Op::Gather(x, index) => {
                let w = self.value(*x).row_len();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (r, &i) in index.iter().enumerate() {
                    for (o, s) in gx[i * w..(i + 1) * w].iter_mut().zip(&gd[r * w..(r + 1) * w]) {
                        *o += s;
                    }
                }
                acc(*x, gx);
            }
            Op::ScatterSum(x, index) => {
                let w = self.value(*x).row_len();
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for &i in index.iter() {
                    gx.extend_from_slice(&gd[i * w..(i + 1) * w]);
                }
                acc(*x, gx);
            }
            Op::L2Normalize { x, axis, eps } => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let mut gx = vec![0.0; xv.len()];
                for_each_lane(node.value.shape(), *axis, |start, len, stride| {
                    let ss: f64 = (0..len).map(|i| xv[start + i * stride].powi(2)).sum();
                    let n = (ss + eps).sqrt();
                    let yg: f64 = (0..len).map(|i| y[start + i * stride] * gd[start + i * stride]).sum();
                    for i in 0..len {
                        let p = start + i * stride;
                        gx[p] = (gd[p] - y[p] * yg) / n;
                    }
                });
                acc(*x, gx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for_each_lane(node.value.shape(), *axis, |start, len, stride| {
                    let dot: f64 = (0..len).map(|i| y[start + i * stride] * gd[start + i * stride]).sum();
                    for i in 0..len {
                        let p = start + i * stride;
                        gx[p] = y[p] * (gd[p] - dot);
                    }
                });
                acc(*x, gx);
            }
            Op::CrossEntropy { logits, probs, labels, ignore, count } => {
                let c = self.shape(*logits)[1];
                let mut gx = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = gd[0] / *count as f64;
                    for (i, &l) in labels.iter().enumerate() {
                        if l == *ignore {
                            continue;
                        }
                        for j in 0..c {
                            gx[i * c + j] = probs[i * c + j] * scale;
                        }
                        gx[i * c + l] -= scale;
                    }
                }
                acc(*logits, gx);
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, transpose_raw(gd, c, r));
            }
            Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = node.value.shape()[1];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![gd[0]; self.value(*x).len()]),
            Op::Norm(x) => {
                let n = node.value.data()[0];
                let xv = self.value(*x).data();
                if n > 0.0 {
                    acc(*x, xv.iter().map(|v| gd[0] * v / n).collect());
                } else {
                    acc(*x, vec![0.0; xv.len()]);
                }
            }
            Op::Max { x, arg } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                gx[*arg] = gd[0];
                acc(*x, gx);
            }
            Op::Normalize { x, gamma, beta, mean, inv_std, batch } => {
                let xv = self.value(*x).data();
                let c = mean.len();
                let n = xv.len() / c;
                let gam = self.value(*gamma).data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut sum_gxhat = vec![0.0; c];
                let mut sum_gxhat_xhat = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        let p = i * c + j;
                        let xhat = (xv[p] - mean[j]) * inv_std[j];
                        ggamma[j] += gd[p] * xhat;
                        gbeta[j] += gd[p];
                        let gxh = gd[p] * gam[j];
                        sum_gxhat[j] += gxh;
                        sum_gxhat_xhat[j] += gxh * xhat;
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for i in 0..n {
                        for j in 0..c {
                            let p = i * c + j;
                            let gxh = gd[p] * gam[j];
                            gx[p] = if *batch {
                                let xhat = (xv[p] - mean[j]) * inv_std[j];
                                inv_std[j] / n as f64
                                    * (n as f64 * gxh - sum_gxhat[j] - xhat * sum_gxhat_xhat[j])
                            } else {
                                gxh * inv_std[j]
                            };
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
            Op::Correlate { features, plan } => {
                let c = self.shape(*features)[1];
                let k = plan.kernel;
                let mut gf = vec![0.0; plan.supports * c];
                for q in 0..plan.queries {
                    let src = &gd[q * k * c..(q + 1) * k * c];
                    for e in plan.offsets[q]..plan.offsets[q + 1] {
                        let s = plan.support[e];
                        let dst = &mut gf[s * c..(s + 1) * c];
                        for (kk, &w) in plan.weights[e * k..(e + 1) * k].iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            for (o, v) in dst.iter_mut().zip(&src[kk * c..(kk + 1) * c]) {
                                *o += w * v;
                            }
                        }
                    }
                }
                acc(*features, gf);
            }
        }
    }
}

fn softmax_lane(src: &[f64], dst: &mut [f64], start: usize, len: usize, stride: usize) {
    let max = (0..len).map(|i| src[start + i * stride]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for i in 0..len {
        let e = (src[start + i * stride] - max).exp();
        dst[start + i * stride] = e;
        total += e;
    }
    for i in 0..len {
        dst[start + i * stride] /= total;
    }
}

#[cfg(test)]
mod tests;
