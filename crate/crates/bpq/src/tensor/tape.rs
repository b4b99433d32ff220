//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! Operations append nodes to the tape and return [`Var`] handles. The tape
//! is single-owner while recording; [`GradTape::backward`] walks the list in
//! reverse exactly once and accumulates gradients for trainable parameters.

use std::sync::Arc;

use super::kernels;
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Const,
    Param { trainable: bool },
    Matmul { a: Var, b: Var },
    MatmulBatched { a: Var, b: Var },
    SwapAxes { x: Var, ax0: usize, ax1: usize },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    /// Broadcast `x` into a larger shape; `map[i]` is the output axis that
    /// x's axis `i` occupies (strictly increasing).
    Expand { x: Var, map: Vec<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(T, T)> },
    Gelu { x: Var },
    MeanAxes { x: Var, axes: Vec<usize> },
    Mse { pred: Var, target: Var },
    MaskedMse { pred: Var, target: Var, mask: Var, mass: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded operation graph with per-parameter gradient accumulators.
pub struct GradTape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by the `Var` they belong to.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a variable; `None` for frozen parameters, constants and
    /// variables the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node[v.0].as_ref()
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const, false).expect("finite constant")
    }

    pub fn param(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param { trainable },
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(vec![m, n], out)?, Op::Matmul { a, b }, needs)
    }

    /// Batched matmul over equal leading dimensions.
    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let rank = sa.len();
        if rank < 2 || sb.len() != rank || sa[..rank - 2] != sb[..rank - 2] || sa[rank - 1] != sb[rank - 2]
        {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_batched",
                lhs: sa,
                rhs: sb,
            });
        }
        let batch: usize = sa[..rank - 2].iter().product();
        let (m, k, n) = (sa[rank - 2], sa[rank - 1], sb[rank - 1]);
        let mut out = vec![T::zero(); batch * m * n];
        kernels::matmul_batched(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            k,
            n,
            &mut out,
        );
        let mut shape = sa[..rank - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(shape, out)?, Op::MatmulBatched { a, b }, needs)
    }

    pub fn swap_axes(&mut self, x: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let rank = shape.len();
        if ax0 >= rank || ax1 >= rank {
            return Err(TensorError::InvalidAxis {
                axis: ax0.max(ax1),
                rank,
            });
        }
        let out = kernels::swap_axes(self.value(x).data(), &shape, ax0, ax1);
        let mut new_shape = shape;
        new_shape.swap(ax0, ax1);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(new_shape, out)?, Op::SwapAxes { x, ax0, ax1 }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(shape, out)?, Op::Add { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(shape, out)?, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    /// Broadcast `x` to `target_shape`; `map[i]` gives the target axis for
    /// x's axis `i` and must be strictly increasing.
    pub fn expand(&mut self, x: Var, target_shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if map.len() != xs.len()
            || map.windows(2).any(|w| w[0] >= w[1])
            || map.iter().any(|&m| m >= target_shape.len())
            || map.iter().zip(&xs).any(|(&m, &d)| target_shape[m] != d)
        {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: xs,
                rhs: target_shape,
            });
        }
        let out = broadcast_forward(self.value(x).data(), &xs, &target_shape, &map);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(target_shape, out)?, Op::Expand { x, map }, needs)
    }

    /// Softmax over the last axis; max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        let rows = self.value(x).numel() / n;
        let mut out = self.value(x).data().to_vec();
        kernels::softmax_rows(&mut out, rows, n);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, out)?, Op::Softmax { x }, needs)
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: shape,
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let rows = self.value(x).numel() / n;
        let mut out = vec![T::zero(); rows * n];
        let stats = kernels::layernorm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            rows,
            n,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::LayerNorm { x, gain, bias, stats },
            needs,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::gelu);
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    /// Mean over a set of axes (removed from the output shape).
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let rank = shape.len();
        if axes.iter().any(|&a| a >= rank) {
            return Err(TensorError::InvalidAxis {
                axis: *axes.iter().max().unwrap(),
                rank,
            });
        }
        let keep: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
        let count: usize = axes.iter().map(|&d| shape[d]).product();
        let mut out = vec![T::zero(); out_shape.iter().product::<usize>().max(1)];
        reduce_sum(self.value(x).data(), &shape, &keep, &mut out);
        let inv = T::one() / T::from_f64(count as f64);
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::MeanAxes { x, axes: axes.to_vec() },
            needs,
        )
    }

    /// Mean squared error over all elements; returns a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: self.value(pred).shape().to_vec(),
                rhs: self.value(target).shape().to_vec(),
            });
        }
        let n = T::from_f64(self.value(pred).numel() as f64);
        let mut sum = T::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(self.value(target).data()) {
            let d = p - t;
            sum = d.mul_add(d, sum);
        }
        let needs = self.needs(pred) || self.needs(target);
        self.push(Tensor::scalar(sum / n), Op::Mse { pred, target }, needs)
    }

    /// MSE restricted to positions where `mask` is 1; normalizes by the mask
    /// mass. Used by the masked-patch pretext.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let shape = self.value(pred).shape();
        if shape != self.value(target).shape() || shape != self.value(mask).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mse",
                lhs: shape.to_vec(),
                rhs: self.value(mask).shape().to_vec(),
            });
        }
        let mut mass = T::zero();
        let mut sum = T::zero();
        for ((&p, &t), &m) in self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .zip(self.value(mask).data())
        {
            let d = p - t;
            sum = (m * d).mul_add(d, sum);
            mass = mass + m;
        }
        let mass = if mass > T::zero() { mass } else { T::one() };
        let needs = self.needs(pred);
        self.push(
            Tensor::scalar(sum / mass),
            Op::MaskedMse { pred, target, mask, mass },
            needs,
        )
    }

    /// Reverse pass from a scalar loss. Visits each recorded op exactly once
    /// and returns gradients for every variable that required them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::LossNotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            self.backprop_node(idx, &grad, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Param { trainable: true }) {
                grads[idx] = Some(grad);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn backprop_node(
        &self,
        idx: usize,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Const | Op::Param { .. } => {}
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    // dA = dC * B^T
                    let mut bt = vec![T::zero(); k * n];
                    kernels::transpose(vb.data(), k, n, &mut bt);
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul(grad.data(), &bt, m, n, k, &mut da);
                    accumulate(grads, *a, va.shape(), &da);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let mut at = vec![T::zero(); m * k];
                    kernels::transpose(va.data(), m, k, &mut at);
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul(&at, grad.data(), k, m, n, &mut db);
                    accumulate(grads, *b, vb.shape(), &db);
                }
            }
            Op::MatmulBatched { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let rank = va.rank();
                let batch: usize = va.shape()[..rank - 2].iter().product();
                let (m, k) = (va.shape()[rank - 2], va.shape()[rank - 1]);
                let n = vb.shape()[rank - 1];
                let mut da = vec![T::zero(); va.numel()];
                let mut db = vec![T::zero(); vb.numel()];
                let mut bt = vec![T::zero(); k * n];
                let mut at = vec![T::zero(); m * k];
                for i in 0..batch {
                    let g = &grad.data()[i * m * n..(i + 1) * m * n];
                    if self.needs(*a) {
                        let bs = &vb.data()[i * k * n..(i + 1) * k * n];
                        kernels::transpose(bs, k, n, &mut bt);
                        kernels::matmul(g, &bt, m, n, k, &mut da[i * m * k..(i + 1) * m * k]);
                    }
                    if self.needs(*b) {
                        let as_ = &va.data()[i * m * k..(i + 1) * m * k];
                        kernels::transpose(as_, m, k, &mut at);
                        kernels::matmul(&at, g, k, m, n, &mut db[i * k * n..(i + 1) * k * n]);
                    }
                }
                if self.needs(*a) {
                    accumulate(grads, *a, va.shape(), &da);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, vb.shape(), &db);
                }
            }
            Op::SwapAxes { x, ax0, ax1 } => {
                if self.needs(*x) {
                    let dg = kernels::swap_axes(grad.data(), grad.shape(), *ax0, *ax1);
                    accumulate(grads, *x, self.value(*x).shape(), &dg);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, self.value(*x).shape(), grad.data());
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, self.value(*v).shape(), grad.data());
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    accumulate(grads, *a, self.value(*a).shape(), &da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    accumulate(grads, *b, self.value(*b).shape(), &db);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let dx: Vec<T> = grad.data().iter().map(|&g| g * *c).collect();
                    accumulate(grads, *x, self.value(*x).shape(), &dx);
                }
            }
            Op::Expand { x, map } => {
                if self.needs(*x) {
                    let xs = self.value(*x).shape();
                    let dx = broadcast_backward(grad.data(), grad.shape(), xs, map);
                    accumulate(grads, *x, xs, &dx);
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let rows = y.numel() / n;
                    let mut dx = vec![T::zero(); y.numel()];
                    for r in 0..rows {
                        let ys = &y.data()[r * n..(r + 1) * n];
                        let gs = &grad.data()[r * n..(r + 1) * n];
                        let mut dot = T::zero();
                        for (&yi, &gi) in ys.iter().zip(gs) {
                            dot = yi.mul_add(gi, dot);
                        }
                        for ((d, &yi), &gi) in dx[r * n..(r + 1) * n].iter_mut().zip(ys).zip(gs) {
                            *d = yi * (gi - dot);
                        }
                    }
                    accumulate(grads, *x, self.value(*x).shape(), &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let vx = self.value(*x);
                let n = *vx.shape().last().unwrap();
                let rows = vx.numel() / n;
                let g = self.value(*gain).data();
                let inv_n = T::one() / T::from_f64(n as f64);
                let mut dx = vec![T::zero(); vx.numel()];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let xs = &vx.data()[r * n..(r + 1) * n];
                    let gs = &grad.data()[r * n..(r + 1) * n];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (xs[j] - mean) * rstd;
                        let dy = gs[j] * g[j];
                        sum_dy = sum_dy + dy;
                        sum_dy_xhat = dy.mul_add(xhat, sum_dy_xhat);
                        dgain[j] = gs[j].mul_add(xhat, dgain[j]);
                        dbias[j] = dbias[j] + gs[j];
                    }
                    let mean_dy = sum_dy * inv_n;
                    let mean_dy_xhat = sum_dy_xhat * inv_n;
                    for j in 0..n {
                        let xhat = (xs[j] - mean) * rstd;
                        let dy = gs[j] * g[j];
                        dx[r * n + j] = rstd * (dy - mean_dy - xhat * mean_dy_xhat);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, vx.shape(), &dx);
                }
                if self.needs(*gain) {
                    accumulate(grads, *gain, &[n], &dgain);
                }
                if self.needs(*bias) {
                    accumulate(grads, *bias, &[n], &dbias);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let dx: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &xv)| g * kernels::gelu_grad(xv))
                        .collect();
                    accumulate(grads, *x, self.value(*x).shape(), &dx);
                }
            }
            Op::MeanAxes { x, axes } => {
                if self.needs(*x) {
                    let xs = self.value(*x).shape();
                    let rank = xs.len();
                    let keep: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
                    let count: usize = axes.iter().map(|&d| xs[d]).product();
                    let inv = T::one() / T::from_f64(count as f64);
                    let scaled: Vec<T> = grad.data().iter().map(|&g| g * inv).collect();
                    let dx = broadcast_backward_from_reduced(&scaled, xs, &keep);
                    accumulate(grads, *x, xs, &dx);
                }
            }
            Op::Mse { pred, target } => {
                if self.needs(*pred) {
                    let g = grad.item();
                    let n = T::from_f64(self.value(*pred).numel() as f64);
                    let two = T::from_f64(2.0);
                    let dp: Vec<T> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(&p, &t)| two * (p - t) / n * g)
                        .collect();
                    accumulate(grads, *pred, self.value(*pred).shape(), &dp);
                }
            }
            Op::MaskedMse { pred, target, mask, mass } => {
                if self.needs(*pred) {
                    let g = grad.item();
                    let two = T::from_f64(2.0);
                    let dp: Vec<T> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .zip(self.value(*mask).data())
                        .map(|((&p, &t), &m)| two * m * (p - t) / *mass * g)
                        .collect();
                    accumulate(grads, *pred, self.value(*pred).shape(), &dp);
                }
            }
        }
        Ok(())
    }
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Const => "const",
        Op::Param { .. } => "param",
        Op::Matmul { .. } => "matmul",
        Op::MatmulBatched { .. } => "matmul_batched",
        Op::SwapAxes { .. } => "swap_axes",
        Op::Reshape { .. } => "reshape",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Expand { .. } => "expand",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::Gelu { .. } => "gelu",
        Op::MeanAxes { .. } => "mean_axes",
        Op::Mse { .. } => "mse",
        Op::MaskedMse { .. } => "masked_mse",
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], add: &[T]) {
    match &mut grads[v.0] {
        Some(existing) => {
            let data = Arc::make_mut(&mut existing.data);
            for (d, &a) in data.iter_mut().zip(add) {
                *d = *d + a;
            }
        }
        slot @ None => {
            *slot = Some(
                Tensor::from_vec(shape.to_vec(), add.to_vec()).expect("gradient shape"),
            );
        }
    }
}

/// Forward broadcast: `out[full index] = x[index restricted to map]`.
fn broadcast_forward<T: Scalar>(
    x: &[T],
    x_shape: &[usize],
    target: &[usize],
    map: &[usize],
) -> Vec<T> {
    let numel: usize = target.iter().product();
    let mut out = vec![T::zero(); numel];
    let mut x_strides = vec![1usize; x_shape.len()];
    for i in (0..x_shape.len().saturating_sub(1)).rev() {
        x_strides[i] = x_strides[i + 1] * x_shape[i + 1];
    }
    // stride of each target axis into x (0 when broadcast)
    let mut src_stride = vec![0usize; target.len()];
    for (i, &m) in map.iter().enumerate() {
        src_stride[m] = x_strides[i];
    }
    let mut idx = vec![0usize; target.len()];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            src += src_stride[d];
            if idx[d] < target[d] {
                break;
            }
            src -= src_stride[d] * target[d];
            idx[d] = 0;
        }
    }
    out
}

/// Backward of broadcast: sum the gradient over the broadcast axes.
fn broadcast_backward<T: Scalar>(
    grad: &[T],
    g_shape: &[usize],
    x_shape: &[usize],
    map: &[usize],
) -> Vec<T> {
    let mut out = vec![T::zero(); x_shape.iter().product()];
    let mut x_strides = vec![1usize; x_shape.len()];
    for i in (0..x_shape.len().saturating_sub(1)).rev() {
        x_strides[i] = x_strides[i + 1] * x_shape[i + 1];
    }
    let mut src_stride = vec![0usize; g_shape.len()];
    for (i, &m) in map.iter().enumerate() {
        src_stride[m] = x_strides[i];
    }
    let mut idx = vec![0usize; g_shape.len()];
    let mut dst = 0usize;
    for &g in grad.iter() {
        out[dst] = out[dst] + g;
        for d in (0..g_shape.len()).rev() {
            idx[d] += 1;
            dst += src_stride[d];
            if idx[d] < g_shape[d] {
                break;
            }
            dst -= src_stride[d] * g_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Sum `x` over the axes not listed in `keep` (which is sorted ascending).
fn reduce_sum<T: Scalar>(x: &[T], shape: &[usize], keep: &[usize], out: &mut [T]) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for &d in keep.iter().rev() {
        out_strides[d] = acc;
        acc *= shape[d];
    }
    let mut idx = vec![0usize; rank];
    let mut dst = 0usize;
    for &v in x.iter() {
        out[dst] = out[dst] + v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            dst += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            dst -= out_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Spread a reduced gradient back over the full shape (used by mean).
fn broadcast_backward_from_reduced<T: Scalar>(
    grad: &[T],
    x_shape: &[usize],
    keep: &[usize],
) -> Vec<T> {
    let rank = x_shape.len();
    let mut out = vec![T::zero(); x_shape.iter().product()];
    let mut g_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for &d in keep.iter().rev() {
        g_strides[d] = acc;
        acc *= x_shape[d];
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = grad[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += g_strides[d];
            if idx[d] < x_shape[d] {
                break;
            }
            src -= g_strides[d] * x_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check<F>(param: &Tensor<f64>, analytic: &Tensor<f64>, eval: F)
    where
        F: Fn(&Tensor<f64>) -> f64,
    {
        let h = 1e-5;
        for i in 0..param.numel() {
            let mut plus = param.data().to_vec();
            plus[i] += h;
            let mut minus = param.data().to_vec();
            minus[i] -= h;
            let fp = eval(&Tensor::from_vec(param.shape().to_vec(), plus).unwrap());
            let fm = eval(&Tensor::from_vec(param.shape().to_vec(), minus).unwrap());
            let fd = (fp - fm) / (2.0 * h);
            let ga = analytic.data()[i];
            let rel = (ga - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "coord {i}: analytic {ga} vs fd {fd}");
        }
    }

    #[test]
    fn sum_of_matmul_gradient_is_outer_product() {
        // loss = sum(W*x) => dL/dW[i][j] = x[j]; check against finite differences
        let w = Tensor::from_vec(vec![3, 4], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect())
            .unwrap();
        let x = Tensor::from_vec(vec![4, 1], vec![0.3, -0.7, 1.1, 0.25]).unwrap();

        let eval = |wt: &Tensor<f64>| {
            let mut tape = GradTape::<f64>::new();
            let wv = tape.param(wt.clone(), true);
            let xv = tape.constant(x.clone());
            let y = tape.matmul(wv, xv).unwrap();
            // reduce to scalar via mean over all axes, rescale to a plain sum
            let m = tape.mean_axes(y, &[0, 1]).unwrap();
            tape.value(m).item() * 3.0
        };

        let mut tape = GradTape::<f64>::new();
        let wv = tape.param(w.clone(), true);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(wv, xv).unwrap();
        let m = tape.mean_axes(y, &[0, 1]).unwrap();
        let loss = tape.scale(m, 3.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(wv).unwrap();

        // outer-product structure: every row of dW equals x^T
        for r in 0..3 {
            for c in 0..4 {
                assert!((gw.data()[r * 4 + c] - x.data()[c]).abs() < 1e-12);
            }
        }
        fd_check(&w, gw, eval);
    }

    #[test]
    fn frozen_parameter_has_no_gradient() {
        let mut tape = GradTape::<f64>::new();
        let frozen = tape.param(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let live = tape.param(Tensor::from_vec(vec![2, 2], vec![0.5; 4]).unwrap(), true);
        let y = tape.matmul(frozen, live).unwrap();
        let loss = tape.mean_axes(y, &[0, 1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(live).is_some());
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = GradTape::<f64>::new();
        let used = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let unused = tape.param(Tensor::from_vec(vec![2], vec![5.0, 6.0]).unwrap(), true);
        let loss = tape.mean_axes(used, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        let _ = unused;
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = GradTape::<f64>::new();
        let p = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let err = tape.backward(p).unwrap_err();
        assert!(matches!(err, TensorError::LossNotScalar { .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradcheck() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.1, -0.4, 0.9, 2.0, 2.0, -1.0]).unwrap();
        let mut tape = GradTape::<f64>::new();
        let xv = tape.param(x.clone(), true);
        let sm = tape.softmax(xv).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(sm).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let t = tape.constant(Tensor::from_vec(vec![2, 3], vec![0.3; 6]).unwrap());
        let loss = tape.mse(sm, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        let eval = |xt: &Tensor<f64>| {
            let mut tape = GradTape::<f64>::new();
            let xv = tape.param(xt.clone(), true);
            let sm = tape.softmax(xv).unwrap();
            let t = tape.constant(Tensor::from_vec(vec![2, 3], vec![0.3; 6]).unwrap());
            let loss = tape.mse(sm, t).unwrap();
            tape.value(loss).item()
        };
        fd_check(&x, grads.get(xv).unwrap(), eval);
    }

    #[test]
    fn layernorm_gradcheck() {
        let x = Tensor::from_vec(vec![2, 4], vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.9, 0.4, 1.5]).unwrap();
        let gain = Tensor::from_vec(vec![4], vec![1.2, 0.8, 1.0, 0.9]).unwrap();
        let bias = Tensor::from_vec(vec![4], vec![0.1, -0.2, 0.0, 0.3]).unwrap();
        let run = |xt: &Tensor<f64>, gt: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut tape = GradTape::<f64>::new();
            let xv = tape.param(xt.clone(), true);
            let gv = tape.param(gt.clone(), true);
            let bv = tape.param(bt.clone(), true);
            let y = tape.layernorm(xv, gv, bv, 1e-5).unwrap();
            let t = tape.constant(Tensor::from_vec(vec![2, 4], vec![0.2; 8]).unwrap());
            let loss = tape.mse(y, t).unwrap();
            (tape, xv, gv, bv, loss)
        };
        let (tape, xv, gv, bv, loss) = run(&x, &gain, &bias);
        let grads = tape.backward(loss).unwrap();
        fd_check(&x, grads.get(xv).unwrap(), |xt| {
            let (tape, _, _, _, loss) = run(xt, &gain, &bias);
            tape.value(loss).item()
        });
        fd_check(&gain, grads.get(gv).unwrap(), |gt| {
            let (tape, _, _, _, loss) = run(&x, gt, &bias);
            tape.value(loss).item()
        });
        fd_check(&bias, grads.get(bv).unwrap(), |bt| {
            let (tape, _, _, _, loss) = run(&x, &gain, bt);
            tape.value(loss).item()
        });
    }

    #[test]
    fn expand_and_mean_axes_gradcheck() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.9]).unwrap();
        let run = |xt: &Tensor<f64>| {
            let mut tape = GradTape::<f64>::new();
            let xv = tape.param(xt.clone(), true);
            let e = tape.expand(xv, vec![4, 2, 3], vec![1, 2]).unwrap();
            let m = tape.mean_axes(e, &[0, 2]).unwrap();
            let t = tape.constant(Tensor::from_vec(vec![2], vec![0.25, -0.5]).unwrap());
            let loss = tape.mse(m, t).unwrap();
            (tape, xv, loss)
        };
        let (tape, xv, loss) = run(&x);
        let grads = tape.backward(loss).unwrap();
        fd_check(&x, grads.get(xv).unwrap(), |xt| {
            let (tape, _, loss) = run(xt);
            tape.value(loss).item()
        });
    }

    #[test]
    fn batched_matmul_and_swap_gradcheck() {
        let a = Tensor::from_vec(vec![2, 3, 2], (0..12).map(|i| 0.07 * i as f64 - 0.4).collect())
            .unwrap();
        let b = Tensor::from_vec(vec![2, 3, 2], (0..12).map(|i| 0.05 * i as f64 - 0.2).collect())
            .unwrap();
        let run = |at: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut tape = GradTape::<f64>::new();
            let av = tape.param(at.clone(), true);
            let bv = tape.param(bt.clone(), true);
            let sw = tape.swap_axes(av, 1, 2).unwrap(); // [2,2,3]
            let prod = tape.matmul_batched(bv, sw).unwrap(); // [2,3,3]
            let g = tape.gelu(prod).unwrap();
            let t = tape.constant(Tensor::zeros(vec![2, 3, 3]));
            let loss = tape.mse(g, t).unwrap();
            (tape, av, bv, loss)
        };
        let (tape, av, bv, loss) = run(&a, &b);
        let grads = tape.backward(loss).unwrap();
        fd_check(&a, grads.get(av).unwrap(), |at| {
            let (tape, _, _, loss) = run(at, &b);
            tape.value(loss).item()
        });
        fd_check(&b, grads.get(bv).unwrap(), |bt| {
            let (tape, _, _, loss) = run(&a, bt);
            tape.value(loss).item()
        });
    }

    #[test]
    fn masked_mse_only_counts_masked_positions() {
        let mut tape = GradTape::<f64>::new();
        let p = tape.param(Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let t = tape.constant(Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap());
        let m = tape.constant(Tensor::from_vec(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let loss = tape.masked_mse(p, t, m).unwrap();
        // (1 + 9) / 2
        assert!((tape.value(loss).item() - 5.0).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(p).unwrap();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[3], 0.0);
        assert!((g.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_give_bit_identical_results() {
        let a = Tensor::from_vec(vec![8, 8], (0..64).map(|i| (i as f32).sin()).collect()).unwrap();
        let run = || {
            let mut tape = GradTape::<f32>::new();
            let av = tape.param(a.clone(), true);
            let b = tape.matmul(av, av).unwrap();
            let s = tape.softmax(b).unwrap();
            tape.value(s).clone()
        };
        assert!(run().bits_eq(&run()));
    }
}
