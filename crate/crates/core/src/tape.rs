//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during one forward pass as a
//! node holding its output value, an op tag and references to its inputs.
//! [`Tape::backward`] replays the nodes in exact reverse order of recording
//! and accumulates gradients into every node that requires them. Nodes are
//! addressed by the copyable [`Var`] handle.
//!
//! The tape is meant to live for a single forward/backward pass; call
//! [`Tape::reset`] (or build a fresh tape) between training steps.

use crate::error::{Error, Result};
use crate::kernels::{self, Bilinear, ConvGeom};
use crate::tensor::{numel, split_at_axis, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    AddAlong { x: Var, b: Var, axis: usize },
    MulAlong { x: Var, b: Var, axis: usize },
    Matmul(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Log(Var),
    Exp(Var),
    Pow(Var, Real),
    Relu(Var),
    Gather(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        batch_stats: bool,
    },
    Interpolate(Var, Bilinear),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddAlong { .. } => "add_along",
            Op::MulAlong { .. } => "mul_along",
            Op::Matmul(..) => "matmul",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Pow(..) => "pow",
            Op::Relu(..) => "relu",
            Op::Gather(..) => "gather",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Interpolate(..) => "interpolate",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
    op: Op,
}

/// Batch statistics produced by a training-mode [`Tape::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    /// Biased (population) variance over the reduced axes.
    pub var: Vec<Real>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Per-channel normalization source for [`Tape::batch_norm`].
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: Real },
    /// Normalize with fixed (running) statistics.
    Fixed {
        mean: &'a [Real],
        var: &'a [Real],
        eps: Real,
    },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

fn permute_data(data: &[Real], shape: &[usize], perm: &[usize]) -> (Vec<Real>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the input for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn axis_in_range(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Vars from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Makes the backward rule of the named op deliberately wrong. Used by the
    /// self-test to prove the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op: Option<&'static str>) {
        self.fault = op;
    }

    /// Names of ops recorded so far, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_need_grad: bool) -> Var {
        let op = if inputs_need_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad: inputs_need_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; `requires_grad` leaves collect gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, false);
        let v = Var(self.nodes.len() - 1);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- elementwise -------------------------------------------------

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: Real) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    fn along(
        &mut self,
        x: Var,
        b: Var,
        axis: usize,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Tensor> {
        let (tx, tb) = (self.value(x), self.value(b));
        axis_in_range(name, tx.shape(), axis)?;
        if tb.numel() != tx.shape()[axis] {
            return Err(Error::shape(name, tx.shape(), tb.shape()));
        }
        let (_, n, inner) = split_at_axis(tx.shape(), axis);
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, bd[(i / inner) % n]))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// Adds `b` (one value per index of `axis`) across all other axes.
    pub fn add_along(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let out = self.along(x, b, axis, "add_along", |v, c| v + c)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddAlong { x, b, axis }, rg))
    }

    /// Multiplies by `b` (one value per index of `axis`) across all other axes.
    pub fn mul_along(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let out = self.along(x, b, axis, "mul_along", |v, c| v * c)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::MulAlong { x, b, axis }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Real::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Real::exp, Op::Exp(x))
    }

    pub fn pow(&mut self, x: Var, p: Real) -> Var {
        self.unary(x, |v| v.powf(p), Op::Pow(x, p))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    // ----- linear algebra ---------------------------------------------

    /// `[M×K]·[K×N]`, or batched `[B×M×K]·[B×K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(Error::shape("matmul", sa, sb));
        }
        let r = sa.len();
        let (batch, m, k, n) = (
            if r == 3 { sa[0] } else { 1 },
            sa[r - 2],
            sa[r - 1],
            sb[r - 1],
        );
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            kernels::gemm_acc(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_last(self.value(x), "softmax", false)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_last(self.value(x), "log_softmax", true)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    // ----- shape manipulation -----------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        let valid = perm.len() == t.rank()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Contract(format!(
                "permute: {perm:?} is not a permutation of {} axes",
                t.rank()
            )));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::cat(&parts, axis)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as Real);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    fn reduce_axis(&self, x: Var, axis: usize, name: &'static str) -> Result<Tensor> {
        let t = self.value(x);
        axis_in_range(name, t.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &t.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis(x, axis, "sum_axis")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(1) as Real;
        let out = self.reduce_axis(x, axis, "mean_axis")?.map(|v| v / n);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAxis(x, axis), rg))
    }

    /// Picks `x[r, indices[r]]` from a `[R×C]` matrix.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != indices.len() {
            return Err(Error::shape("gather", t.shape(), &[indices.len()]));
        }
        let c = t.shape()[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::Contract(format!(
                "gather: index {bad} out of range for {c} columns"
            )));
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * c + i])
            .collect();
        let out = Tensor::new(vec![indices.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather(x, indices.to_vec()), rg))
    }

    // ----- layers ------------------------------------------------------

    /// Grouped 2-D cross-correlation on `[B, C_in, H, W]` with zero padding.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || groups == 0 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Contract("conv2d: stride and dilation must be positive".into()));
        }
        let (cin, cout, k) = (sx[1], sw[0], sw[2]);
        if cin % groups != 0 || cout % groups != 0 || sw[1] != cin / groups {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d bias", sw, self.value(b).shape()));
            }
        }
        let k_eff = k + (k - 1) * (dilation - 1);
        let (ph, pw) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
        if ph < k_eff || pw < k_eff {
            return Err(Error::KernelTooLarge {
                extent: ph.min(pw),
                k_eff,
                context: None,
            });
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_channels: cin,
            out_channels: cout,
            groups,
            in_h: sx[2],
            in_w: sx[3],
            kernel: k,
            stride,
            dilation,
            padding,
            out_h: (ph - k_eff) / stride + 1,
            out_w: (pw - k_eff) / stride + 1,
        };
        let bias = b.map(|b| self.value(b).data());
        let data = geom.forward(tx.data(), tw.data(), bias);
        let out = Tensor::new(vec![geom.batch, cout, geom.out_h, geom.out_w], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-channel normalization over every axis except 1, followed by the
    /// affine map `gamma * x_hat + beta`. Returns the batch statistics when
    /// normalizing with [`NormMode::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::Contract("batch_norm needs rank >= 2".into()));
        }
        let c = t.shape()[1];
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::shape("batch_norm", t.shape(), self.value(p).shape()));
            }
        }
        let (outer, _, inner) = split_at_axis(t.shape(), 1);
        let count = outer * inner;
        let (mean, inv_std, stats, batch_stats) = match mode {
            NormMode::Batch { eps } => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let s = &t.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        *m += s.iter().sum::<Real>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as Real);
                for o in 0..outer {
                    for ch in 0..c {
                        let s = &t.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<Real>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as Real);
                let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var,
                    count,
                };
                (mean, inv_std, Some(stats), true)
            }
            NormMode::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm stats", t.shape(), &[mean.len()]));
                }
                let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for (i, &v) in t.data().iter().enumerate() {
            let ch = (i / inner) % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + bt[ch];
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Align-corners-false bilinear resize of the last two axes.
    pub fn interpolate(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Contract("interpolate: zero target extent".into()));
        }
        let t = self.value(x);
        let r = t.rank();
        if r < 2 {
            return Err(Error::Contract("interpolate needs rank >= 2".into()));
        }
        let (in_h, in_w) = (t.shape()[r - 2], t.shape()[r - 1]);
        let planes = numel(&t.shape()[..r - 2]);
        let op = Bilinear::new(planes, in_h, in_w, out_h, out_w);
        let data = op.forward(t.data());
        let mut shape = t.shape().to_vec();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Interpolate(x, op), rg))
    }

    // ----- backward ----------------------------------------------------

    /// Back-propagates from a scalar `loss`. Gradients accumulate across
    /// calls until [`Tape::zero_grad`] or [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<Real>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut contribs = self.node_backward(i, &g);
            if self.fault == Some(node.op.name()) {
                for (_, c) in &mut contribs {
                    c.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    /// Gradient contributions of node `i` to its inputs, given its adjoint.
    fn node_backward(&self, i: usize, g: &[Real]) -> Vec<(Var, Vec<Real>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::AddAlong { x, b, axis } => {
                let (_, n, inner) = split_at_axis(node.value.shape(), *axis);
                let mut db = vec![0.0; n];
                for (k, &gv) in g.iter().enumerate() {
                    db[(k / inner) % n] += gv;
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::MulAlong { x, b, axis } => {
                let (_, n, inner) = split_at_axis(node.value.shape(), *axis);
                let (xv, bv) = (self.val(*x), self.val(*b));
                let mut dx = vec![0.0; g.len()];
                let mut db = vec![0.0; n];
                for (k, &gv) in g.iter().enumerate() {
                    let ch = (k / inner) % n;
                    dx[k] = gv * bv[ch];
                    db[ch] += gv * xv[k];
                }
                vec![(*x, dx), (*b, db)]
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let batch = if r == 3 { sa[0] } else { 1 };
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut da = vec![0.0; av.len()];
                let mut dbm = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    kernels::gemm_nt_acc(
                        gs,
                        &bv[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    kernels::gemm_tn_acc(
                        &av[bi * m * k..(bi + 1) * m * k],
                        gs,
                        &mut dbm[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                vec![(*a, da), (*b, dbm)]
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let total: Real = gr.iter().sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (dx, _) = permute_data(g, node.value.shape(), &inv);
                vec![(*x, dx)]
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                xs.iter()
                    .map(|&v| {
                        let len = self.shape(v)[*axis];
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        offset += len;
                        (v, d)
                    })
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, n, inner) = split_at_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; numel(src_shape)];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; numel(self.shape(*x))])],
            Op::Mean(x) => {
                let n = numel(self.shape(*x));
                vec![(*x, vec![g[0] / n as Real; n])]
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = split_at_axis(self.shape(*x), *axis);
                let c = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / n as Real
                } else {
                    1.0
                };
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            dx[(o * n + j) * inner + k] = g[o * inner + k] * c;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Log(x) => {
                let xv = self.val(*x);
                vec![(*x, g.iter().zip(xv).map(|(g, x)| g / x).collect())]
            }
            Op::Exp(x) => vec![(*x, g.iter().zip(y).map(|(g, y)| g * y).collect())],
            Op::Pow(x, p) => {
                let xv = self.val(*x);
                let dx = if *p == 0.0 {
                    vec![0.0; g.len()]
                } else {
                    g.iter()
                        .zip(xv)
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect()
                };
                vec![(*x, dx)]
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Gather(x, idx) => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; idx.len() * c];
                for (r, &j) in idx.iter().enumerate() {
                    dx[r * c + j] = g[r];
                }
                vec![(*x, dx)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = geom.backward(self.val(*x), self.val(*w), g);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let c = shape[1];
                let (outer, _, inner) = split_at_axis(shape, 1);
                let gam = self.val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (k, &gv) in g.iter().enumerate() {
                    let ch = (k / inner) % c;
                    dgamma[ch] += gv * xhat[k];
                    dbeta[ch] += gv;
                }
                let mut dx = vec![0.0; g.len()];
                if *batch_stats {
                    let n = (outer * inner) as Real;
                    for (k, d) in dx.iter_mut().enumerate() {
                        let ch = (k / inner) % c;
                        // dxhat sums: sum(g*gamma) = gamma*dbeta, sum(g*gamma*xhat) = gamma*dgamma
                        *d = gam[ch] * inv_std[ch] / n
                            * (n * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                    }
                } else {
                    for (k, d) in dx.iter_mut().enumerate() {
                        let ch = (k / inner) % c;
                        *d = g[k] * gam[ch] * inv_std[ch];
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Interpolate(x, op) => vec![(*x, op.backward(g))],
        }
    }
}

fn softmax_last(t: &Tensor, op: &'static str, log: bool) -> Result<Tensor> {
    if t.rank() == 0 {
        return Err(Error::Contract(format!("{op} needs rank >= 1")));
    }
    if !t.is_finite() {
        return Err(Error::Numeric {
            op,
            msg: "non-finite input".into(),
        });
    }
    let n = *t.shape().last().unwrap();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v -= max;
            total += v.exp();
        }
        if log {
            let lse = total.ln();
            row.iter_mut().for_each(|v| *v -= lse);
        } else {
            row.iter_mut().for_each(|v| *v = v.exp() / total);
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as Real));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_collect_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let x = tape.param(Tensor::ones(&[3]));
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[4, 2]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![Real::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as Real));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }
}
