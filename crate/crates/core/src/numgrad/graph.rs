//! Tape of recorded operations and the reverse pass over it.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! `backward` simply walks it in reverse.

use super::params::{ParamId, ParamStore};
use super::tensor::{inverse_perm, permute_data, split_axis, Tensor};
use crate::error::{AsdError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-9;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Probability clamp used by the cross-entropy loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { x: Var, w: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, s: f64 },
    Relu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Mse { pred: Var, target: Var },
    CrossEntropy { probs: Var, target: Var },
    Sum { x: Var },
    SumSquares { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MeanAxis { .. } => "mean_pool",
            Op::MaxAxis { .. } => "max_pool",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Mse { .. } => "mse_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::SumSquares { .. } => "sum_squares",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul { x, w } => vec![*x, *w],
            Op::Bmm { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gain, bias, .. } | Op::BatchNorm { x, gain, bias, .. } => {
                vec![*x, *gain, *bias]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::Mse { pred, target } => vec![*pred, *target],
            Op::CrossEntropy { probs, target } => vec![*probs, *target],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Softmax { x }
            | Op::MeanAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Sum { x }
            | Op::SumSquares { x } => vec![*x],
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient accumulated at `v` by the last backward pass, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let g = &self.grads[v.0];
        (!g.is_empty()).then_some(g.as_slice())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AsdError::State(format!(
                "non-finite value produced by {} (shape {:?})",
                op.name(),
                value.shape()
            )));
        }
        let needs = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.needs_grad[v.0]),
        };
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        self.grads.push(Vec::new());
        Ok(Var(self.ops.len() - 1))
    }

    /// Constant data; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(AsdError::shape("matmul", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.values[x.0].len() / k;
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            self.values[x.0].data(),
            (k, 1),
            self.values[w.0].data(),
            (n, 1),
            &mut out,
            0.0,
        );
        self.push(Tensor::new(out_shape, out)?, Op::MatMul { x, w })
    }

    /// Batched product `a[g, m, k] @ b[g, k, n]`, or `a @ b^T` per group when
    /// `trans_b` (then `b` is `[g, n, k]`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let ok = as_.len() == 3
            && bs.len() == 3
            && as_[0] == bs[0]
            && if trans_b { as_[2] == bs[2] } else { as_[2] == bs[1] };
        if !ok {
            return Err(AsdError::shape("bmm", as_, bs));
        }
        let (g, m, k) = (as_[0], as_[1], as_[2]);
        let n = if trans_b { bs[1] } else { bs[2] };
        let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ag = &ad[gi * m * k..(gi + 1) * m * k];
            let bg = &bd[gi * k * n..(gi + 1) * k * n];
            let og = &mut out[gi * m * n..(gi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..k {
                        let bv = if trans_b { bg[j * k + l] } else { bg[l * n + j] };
                        s += ag[i * k + l] * bv;
                    }
                    og[i * n + j] = s;
                }
            }
        }
        self.push(Tensor::new(vec![g, m, n], out)?, Op::Bmm { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AsdError::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, Op::Add { a, b })
    }

    /// Adds a `[n]` vector to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        if self.shape(bias) != [n] {
            return Err(AsdError::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.values[bias.0].data();
        let mut out = self.values[x.0].data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.values[x.0].data().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::Scale { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.values[x.0].data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::Relu { x })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        let mut out = self.values[x.0].data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::Softmax { x })
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(AsdError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xd = self.values[x.0].data();
        let (g, b) = (self.values[gain.0].data(), self.values[bias.0].data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(xd.len() / n);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Batch normalization per feature (last dimension), reducing over all
    /// leading rows. Training mode normalizes with the batch statistics and
    /// returns them so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let n = self.values[x.0].last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(AsdError::shape("batch_norm", self.shape(x), self.shape(gain)));
        }
        let xd = self.values[x.0].data();
        let rows = xd.len() / n;
        let (g, b) = (self.values[gain.0].data(), self.values[bias.0].data());
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; n];
                for row in xd.chunks(n) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; n];
                for row in xd.chunks(n) {
                    for j in 0..n {
                        var[j] += (row[j] - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(AsdError::shape("batch_norm stats", &[n], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(n) {
            for j in 0..n {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(t, Op::BatchNorm { x, gain, bias, xhat, inv_std, train })?;
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AsdError::shape("mean_pool", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { x, axis })
    }

    /// Max over `axis`; ties resolve to the lowest index.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AsdError::shape("max_pool", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.values[x.0].data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = xd[(o * len + a) * inner + i];
                    let k = o * inner + i;
                    if v > out[k] {
                        out[k] = v;
                        argmax[k] = (o * len + a) * inner + i;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(Tensor::new(out_shape, out)?, Op::MaxAxis { x, argmax })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(AsdError::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AsdError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let d = self.values[p.0].data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.values[x.0].clone().reshaped(shape)?;
        self.push(t, Op::Reshape { x })
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != shape.len() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(AsdError::shape("permute", &shape, perm));
        }
        let out = permute_data(self.values[x.0].data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(Tensor::new(out_shape, out)?, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Squared L2 error summed over the last dimension and averaged over the
    /// remaining rows.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(AsdError::shape("mse_loss", self.shape(pred), self.shape(target)));
        }
        let rows = self.values[pred.0].len() / self.values[pred.0].last_dim();
        let s: f64 = self.values[pred.0]
            .data()
            .iter()
            .zip(self.values[target.0].data())
            .map(|(p, t)| (p - t).powi(2))
            .sum();
        self.push(Tensor::scalar(s / rows as f64), Op::Mse { pred, target })
    }

    /// Cross-entropy of row-wise probabilities against one-hot (or soft)
    /// targets, averaged over rows. Probabilities are clamped at
    /// [`PROB_FLOOR`] before the log.
    pub fn cross_entropy(&mut self, probs: Var, target: Var) -> Result<Var> {
        if self.shape(probs) != self.shape(target) {
            return Err(AsdError::shape("cross_entropy", self.shape(probs), self.shape(target)));
        }
        let rows = self.values[probs.0].len() / self.values[probs.0].last_dim();
        let s: f64 = self.values[probs.0]
            .data()
            .iter()
            .zip(self.values[target.0].data())
            .filter(|(_, &l)| l != 0.0)
            .map(|(&p, &l)| -l * p.max(PROB_FLOOR).ln())
            .sum();
        self.push(Tensor::scalar(s / rows as f64), Op::CrossEntropy { probs, target })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x })
    }

    /// `wa * a + wb * b` for same-shaped nodes.
    pub fn weighted_sum(&mut self, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
        let sa = self.scale(a, wa)?;
        let sb = self.scale(b, wb)?;
        self.add(sa, sb)
    }

    /// Reverse pass from a scalar loss. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AsdError::State(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(AsdError::shape("backward", self.shape(loss), &[]));
        }
        self.backward_done = true;
        self.grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() || !self.needs_grad[i] {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    /// Adds every parameter node's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Param(id) = op {
                if !self.grads[i].is_empty() {
                    store
                        .grad_mut(*id)
                        .iter_mut()
                        .zip(&self.grads[i])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.needs_grad[v.0] {
            return None;
        }
        if self.grads[v.0].is_empty() {
            self.grads[v.0] = vec![0.0; self.values[v.0].len()];
        }
        Some(&mut self.grads[v.0])
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op so its saved data can be read while input
        // gradient slots are mutated.
        let op = std::mem::replace(&mut self.ops[i], Op::Input);
        match &op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { x, w } => {
                let (k, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = self.values[x.0].len() / k;
                if self.needs_grad[x.0] {
                    let wd = self.values[w.0].data().to_vec();
                    let dx = self.grad_slot(*x).unwrap();
                    // dx[rows,k] += g[rows,n] @ w^T
                    gemm(rows, n, k, g, (n, 1), &wd, (1, n), dx, 1.0);
                }
                if self.needs_grad[w.0] {
                    let xd = self.values[x.0].data().to_vec();
                    let dw = self.grad_slot(*w).unwrap();
                    // dw[k,n] += x^T @ g
                    gemm(k, rows, n, &xd, (1, k), g, (n, 1), dw, 1.0);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (gn, m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1], s[2])
                };
                let n = if *trans_b { self.shape(*b)[1] } else { self.shape(*b)[2] };
                let ad = self.values[a.0].data().to_vec();
                let bd = self.values[b.0].data().to_vec();
                if let Some(da) = self.grad_slot(*a) {
                    for gi in 0..gn {
                        for r in 0..m {
                            for l in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    let bv = if *trans_b {
                                        bd[gi * n * k + j * k + l]
                                    } else {
                                        bd[gi * k * n + l * n + j]
                                    };
                                    s += g[gi * m * n + r * n + j] * bv;
                                }
                                da[gi * m * k + r * k + l] += s;
                            }
                        }
                    }
                }
                if let Some(db) = self.grad_slot(*b) {
                    for gi in 0..gn {
                        for r in 0..m {
                            for l in 0..k {
                                let av = ad[gi * m * k + r * k + l];
                                for j in 0..n {
                                    let gv = g[gi * m * n + r * n + j];
                                    if *trans_b {
                                        db[gi * n * k + j * k + l] += gv * av;
                                    } else {
                                        db[gi * k * n + l * n + j] += gv * av;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.grad_slot(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.grad_slot(*bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(dx) = self.grad_slot(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::Relu { x } => {
                if self.needs_grad[x.0] {
                    let xd = self.values[x.0].data().to_vec();
                    let dx = self.grad_slot(*x).unwrap();
                    for ((d, g), v) in dx.iter_mut().zip(g).zip(&xd) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs_grad[x.0] {
                    let y = self.values[i].data().to_vec();
                    let n = self.values[i].last_dim();
                    let dx = self.grad_slot(*x).unwrap();
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = self.values[i].last_dim();
                let gv = self.values[gain.0].data().to_vec();
                if let Some(dgain) = self.grad_slot(*gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dgain[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(dbias) = self.grad_slot(*bias) {
                    for gr in g.chunks(n) {
                        dbias.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = self.grad_slot(*x) {
                    let nf = n as f64;
                    for (r, ((dr, gr), hr)) in
                        dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += inv_std[r] / nf * (nf * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std, train } => {
                let n = self.values[i].last_dim();
                let rows = self.values[i].len() / n;
                let gv = self.values[gain.0].data().to_vec();
                let mut s1 = vec![0.0; n]; // sum of dy
                let mut s2 = vec![0.0; n]; // sum of dy * xhat
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        s1[j] += gr[j];
                        s2[j] += gr[j] * hr[j];
                    }
                }
                if let Some(dgain) = self.grad_slot(*gain) {
                    dgain.iter_mut().zip(&s2).for_each(|(d, s)| *d += s);
                }
                if let Some(dbias) = self.grad_slot(*bias) {
                    dbias.iter_mut().zip(&s1).for_each(|(d, s)| *d += s);
                }
                if let Some(dx) = self.grad_slot(*x) {
                    let m = rows as f64;
                    for ((dr, gr), hr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            let scale = gv[j] * inv_std[j];
                            if *train {
                                dr[j] += scale / m * (m * gr[j] - s1[j] - hr[j] * s2[j]);
                            } else {
                                dr[j] += scale * gr[j];
                            }
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                if let Some(dx) = self.grad_slot(*x) {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut dx[(o * len + a) * inner..(o * len + a + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s / len as f64);
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax, .. } => {
                if let Some(dx) = self.grad_slot(*x) {
                    for (k, &src) in argmax.iter().enumerate() {
                        dx[src] += g[k];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.shape(parts[0]).to_vec();
                let (outer, _, inner) = split_axis(&shape, *axis);
                let total = self.values[i].shape()[*axis];
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if let Some(dp) = self.grad_slot(*p) {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            dp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    start += len;
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.grad_slot(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Permute { x, perm } => {
                let out_shape = self.values[i].shape().to_vec();
                if let Some(dx) = self.grad_slot(*x) {
                    let back = permute_data(g, &out_shape, &inverse_perm(perm));
                    dx.iter_mut().zip(&back).for_each(|(d, g)| *d += g);
                }
            }
            Op::Mse { pred, target } => {
                let rows = (self.values[pred.0].len() / self.values[pred.0].last_dim()) as f64;
                let diff: Vec<f64> = self.values[pred.0]
                    .data()
                    .iter()
                    .zip(self.values[target.0].data())
                    .map(|(p, t)| 2.0 * (p - t) / rows * g[0])
                    .collect();
                if let Some(dp) = self.grad_slot(*pred) {
                    dp.iter_mut().zip(&diff).for_each(|(d, v)| *d += v);
                }
                if let Some(dt) = self.grad_slot(*target) {
                    dt.iter_mut().zip(&diff).for_each(|(d, v)| *d -= v);
                }
            }
            Op::CrossEntropy { probs, target } => {
                let rows = (self.values[probs.0].len() / self.values[probs.0].last_dim()) as f64;
                let p = self.values[probs.0].data().to_vec();
                let l = self.values[target.0].data().to_vec();
                if let Some(dp) = self.grad_slot(*probs) {
                    for j in 0..p.len() {
                        if l[j] != 0.0 && p[j] > PROB_FLOOR {
                            dp[j] -= g[0] * l[j] / (p[j] * rows);
                        }
                    }
                }
                if let Some(dl) = self.grad_slot(*target) {
                    for j in 0..p.len() {
                        dl[j] -= g[0] * p[j].max(PROB_FLOOR).ln() / rows;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.grad_slot(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumSquares { x } => {
                if self.needs_grad[x.0] {
                    let xd = self.values[x.0].data().to_vec();
                    let dx = self.grad_slot(*x).unwrap();
                    dx.iter_mut().zip(&xd).for_each(|(d, v)| *d += 2.0 * v * g[0]);
                }
            }
        }
        self.ops[i] = op;
    }
}

/// `c[m,n] = beta * c + a[m,k] @ b[k,n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover the strided extents checked above, and `c`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[-2.5, 3.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn cross_entropy_reference() {
        let mut g = Graph::new();
        let p = g.input(t(&[1, 3], &[0.7, 0.2, 0.1])).unwrap();
        let l = g.input(t(&[1, 3], &[1.0, 0.0, 0.0])).unwrap();
        let ce = g.cross_entropy(p, l).unwrap();
        assert_relative_eq!(g.value(ce).item(), -(0.7f64.ln()), epsilon = 1e-15);
        assert!((g.value(ce).item() - 0.35667).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut g = Graph::new();
        let p = g.input(t(&[1, 2], &[0.0, 1.0])).unwrap();
        let l = g.input(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let ce = g.cross_entropy(p, l).unwrap();
        assert_relative_eq!(g.value(ce).item(), -(1e-12f64.ln()), epsilon = 1e-9);
    }

    #[test]
    fn quadratic_gradient_is_twice_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let loss = g.sum_squares(w).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(id), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn matmul_gradient_hand_calculus() {
        // y = x W with x = [[1, 2]], loss = sum(y) => dW[i][j] = x[i]
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2, 2], &[0.3, -0.1, 0.7, 0.2]));
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = g.param(&store, id).unwrap();
        let y = g.matmul(x, w).unwrap();
        assert_relative_eq!(g.value(y).data()[0], 0.3 + 1.4, epsilon = 1e-15);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(id), &[1.0, 1.0, 2.0, 2.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[1], &[1.0]));
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let loss = g.sum_squares(w).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(AsdError::State(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.input(Tensor::zeros(vec![2, 4])).unwrap();
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn max_pool_routes_to_lowest_tied_index() {
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[1, 3, 2], &[5.0, 1.0, 5.0, 2.0, 0.0, 2.0]));
        let mut g = Graph::new();
        let x = g.param(&store, id).unwrap();
        let m = g.max_pool(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[5.0, 2.0]);
        let loss = g.sum(m).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(id), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_values_are_engine_faults() {
        let mut g = Graph::new();
        assert!(g.input(t(&[1], &[f64::NAN])).is_err());
        let x = g.input(t(&[1], &[1e200])).unwrap();
        assert!(g.sum_squares(x).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut store = ParamStore::new();
        let gain = store.add("g", Tensor::filled(vec![5], 1.0));
        let bias = store.add("b", Tensor::zeros(vec![5]));
        let mut g = Graph::new();
        let x = g.input(t(&[2, 5], &[1., 2., 3., 4., 10., -3., 0., 0.5, 7., 2.])).unwrap();
        let (gv, bv) = (g.param(&store, gain).unwrap(), g.param(&store, bias).unwrap());
        let y = g.layer_norm(x, gv, bv).unwrap();
        for row in g.value(y).data().chunks(5) {
            let m = row.iter().sum::<f64>() / 5.0;
            let v = row.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_eval_uses_supplied_stats() {
        let mut store = ParamStore::new();
        let gain = store.add("g", Tensor::filled(vec![2], 2.0));
        let bias = store.add("b", Tensor::filled(vec![2], 1.0));
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[3.0, 3.0])).unwrap();
        let (gv, bv) = (g.param(&store, gain).unwrap(), g.param(&store, bias).unwrap());
        let (y, stats) = g
            .batch_norm(x, gv, bv, BnMode::Eval { mean: &[1.0, 3.0], var: &[4.0, 1.0] })
            .unwrap();
        assert!(stats.is_none());
        let expect0 = 2.0 * 2.0 / (4.0 + BATCH_NORM_EPS).sqrt() + 1.0;
        assert_relative_eq!(g.value(y).data()[0], expect0, epsilon = 1e-12);
        assert_relative_eq!(g.value(y).data()[1], 1.0, epsilon = 1e-12);
    }
}
