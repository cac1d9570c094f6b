//! Reverse-mode differentiation over a small fixed op set.
//!
//! A `Graph` is a define-by-run tape: each op evaluates eagerly and records
//! enough to replay the chain rule in reverse insertion order. Node ids are
//! plain indices, so two backward passes over the same graph walk the same
//! sequence and produce bit-identical gradients.

use crate::error::{Error, Result};
use crate::tensor::{split_at_axis, Scalar, Tensor};

/// Variance epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddConst { a: NodeId },
    MulConst { a: NodeId, c: Tensor<T> },
    Scale { a: NodeId, s: T },
    Softmax { a: NodeId, axis: usize },
    Sigmoid { a: NodeId },
    L2Normalize { a: NodeId, axis: usize, eps: T },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: T },
    Gelu { a: NodeId },
    Gather { table: NodeId, indices: Vec<usize> },
    SumAxis { a: NodeId, axis: usize },
    SumAll { a: NodeId },
    Reshape { a: NodeId, from: Vec<usize> },
    Permute { a: NodeId, axes: Vec<usize> },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    AbsToRel { a: NodeId },
    RelToAbs { a: NodeId },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients per node id, populated by `Graph::backward`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter node; zero tensor if the loss never touched it.
    pub fn for_param(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Leaf that does not receive a gradient (data, constants built at runtime).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (trainable parameter).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── op construction ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Matmul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul { a, b }, rg))
    }

    /// Add a constant tensor (broadcasting); the constant gets no gradient.
    pub fn add_const(&mut self, a: NodeId, c: Tensor<T>) -> Result<NodeId> {
        let v = self.value(a).add(&c)?;
        let rg = self.needs(a);
        Ok(self.push(v, Op::AddConst { a }, rg))
    }

    /// Multiply by a constant tensor (broadcasting); used for pad masks,
    /// partition masks, and dropout keep-masks.
    pub fn mul_const(&mut self, a: NodeId, c: Tensor<T>) -> Result<NodeId> {
        let v = self.value(a).mul(&c)?;
        let rg = self.needs(a);
        Ok(self.push(v, Op::MulConst { a, c }, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.needs(a);
        self.push(v, Op::Scale { a, s }, rg)
    }

    /// Softmax along `axis`. Entries at -inf map to exactly zero; a slice
    /// that is entirely -inf yields an all-zero slice.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        if axis >= self.value(a).rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                self.value(a).shape()
            )));
        }
        let v = softmax_forward(self.value(a), axis);
        let rg = self.needs(a);
        Ok(self.push(v, Op::Softmax { a, axis }, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid_scalar);
        let rg = self.needs(a);
        self.push(v, Op::Sigmoid { a }, rg)
    }

    /// Divide each slice along `axis` by sqrt(sum of squares + eps^2).
    pub fn l2_normalize(&mut self, a: NodeId, axis: usize, eps: T) -> Result<NodeId> {
        if !(eps > T::ZERO) {
            return Err(Error::Numeric("l2_normalize needs eps > 0".into()));
        }
        if axis >= self.value(a).rank() {
            return Err(Error::Shape(format!(
                "l2_normalize axis {axis} out of range for {:?}",
                self.value(a).shape()
            )));
        }
        let v = l2_normalize_forward(self.value(a), axis, eps);
        let rg = self.needs(a);
        Ok(self.push(v, Op::L2Normalize { a, axis, eps }, rg))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let eps = T::from_f64(LAYER_NORM_EPS);
        let d = *self
            .value(x)
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must have extent {d}, got {:?}/{:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let v = layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps);
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_scalar);
        let rg = self.needs(a);
        self.push(v, Op::Gelu { a }, rg)
    }

    /// Select rows along axis 0: out[i, ..] = table[indices[i], ..].
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let rows = t.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let row_len: usize = t.shape()[1..].iter().product();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&t.shape()[1..]);
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * row_len..(i + 1) * row_len]);
        }
        let v = Tensor::new(shape, data)?;
        let rg = self.needs(table);
        Ok(self.push(
            v,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a).sum_axis(axis)?;
        let rg = self.needs(a);
        Ok(self.push(v, Op::SumAxis { a, axis }, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_all());
        let rg = self.needs(a);
        self.push(v, Op::SumAll { a }, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let from = self.value(a).shape().to_vec();
        let v = self.value(a).reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(v, Op::Reshape { a, from }, rg))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = self.value(a).permute(axes)?;
        let rg = self.needs(a);
        Ok(self.push(
            v,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose_last(&mut self, a: NodeId) -> Result<NodeId> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` ([m, vocab]).
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rank() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy wants [rows, vocab] logits, got {:?}",
                z.shape()
            )));
        }
        let (m, v) = (z.shape()[0], z.shape()[1]);
        if labels.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy: {m} logit rows vs {} labels",
                labels.len()
            )));
        }
        if m == 0 {
            return Err(Error::Data("cross_entropy on zero rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(Error::Data(format!("label {bad} out of vocab {v}")));
        }
        let mut total = 0.0f64;
        for i in 0..m {
            let row = &z.data()[i * v..(i + 1) * v];
            total += log_sum_exp(row) - row[labels[i]].to_f64();
        }
        let loss = Tensor::scalar(T::from_f64(total / m as f64));
        let rg = self.needs(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Scatter an [l, l] score sheet into relative coordinates [l, 2l-1]:
    /// out[i, j-i+l-1] = in[i, j]. Slots with no absolute counterpart are 0.
    pub fn abs_to_rel(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != t.shape()[1] {
            return Err(Error::Shape(format!(
                "abs_to_rel wants square [l, l], got {:?}",
                t.shape()
            )));
        }
        let l = t.shape()[0];
        let mut out = Tensor::zeros(&[l, 2 * l - 1]);
        for i in 0..l {
            for j in 0..l {
                let r = j + l - 1 - i;
                out.data_mut()[i * (2 * l - 1) + r] = t.data()[i * l + j];
            }
        }
        let rg = self.needs(a);
        Ok(self.push(out, Op::AbsToRel { a }, rg))
    }

    /// Read an [l, 2l-1] relative sheet back to absolute coordinates:
    /// out[i, j] = in[i, j-i+l-1].
    pub fn rel_to_abs(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[1] != 2 * t.shape()[0] - 1 {
            return Err(Error::Shape(format!(
                "rel_to_abs wants [l, 2l-1], got {:?}",
                t.shape()
            )));
        }
        let l = t.shape()[0];
        let mut out = Tensor::zeros(&[l, l]);
        for i in 0..l {
            for j in 0..l {
                let r = j + l - 1 - i;
                out.data_mut()[i * l + j] = t.data()[i * (2 * l - 1) + r];
            }
        }
        let rg = self.needs(a);
        Ok(self.push(out, Op::RelToAbs { a }, rg))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns one gradient per reachable
    /// node that requires one; deterministic accumulation order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().unwrap();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    if self.needs(*a) {
                        let bt = self.value(*b).transpose_last()?;
                        let da = g.matmul(&bt)?.reduce_to_shape(self.value(*a).shape())?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        let at = self.value(*a).transpose_last()?;
                        let db = at.matmul(&g)?.reduce_to_shape(self.value(*b).shape())?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.reduce_to_shape(self.value(*a).shape())?)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.reduce_to_shape(self.value(*b).shape())?)?;
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let da = g
                            .mul(self.value(*b))?
                            .reduce_to_shape(self.value(*a).shape())?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        let db = g
                            .mul(self.value(*a))?
                            .reduce_to_shape(self.value(*b).shape())?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::AddConst { a } => {
                    accumulate(&mut grads, *a, g.reduce_to_shape(self.value(*a).shape())?)?;
                }
                Op::MulConst { a, c } => {
                    let da = g.mul(c)?.reduce_to_shape(self.value(*a).shape())?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Scale { a, s } => {
                    accumulate(&mut grads, *a, g.scale(*s))?;
                }
                Op::Softmax { a, axis } => {
                    let y = &self.nodes[id].value;
                    accumulate(&mut grads, *a, softmax_backward(y, &g, *axis))?;
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[id].value;
                    let da = g.zip(y, |gv, yv| gv * yv * (T::ONE - yv))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::L2Normalize { a, axis, eps } => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, l2_normalize_backward(x, &g, *axis, *eps))?;
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (dx, dg, db) =
                        layer_norm_backward(self.value(*x), self.value(*gain), &g, *eps);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx)?;
                    }
                    if self.needs(*gain) {
                        accumulate(&mut grads, *gain, dg)?;
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, db)?;
                    }
                }
                Op::Gelu { a } => {
                    let x = self.value(*a);
                    let da = g.zip(x, |gv, xv| gv * T::from_f64(gelu_grad(xv.to_f64())))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Gather { table, indices } => {
                    let t = self.value(*table);
                    let row_len: usize = t.shape()[1..].iter().product();
                    let mut dt = Tensor::zeros(t.shape());
                    for (i, &src) in indices.iter().enumerate() {
                        let from = &g.data()[i * row_len..(i + 1) * row_len];
                        let to = &mut dt.data_mut()[src * row_len..(src + 1) * row_len];
                        for (tv, &fv) in to.iter_mut().zip(from) {
                            *tv = *tv + fv;
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::SumAxis { a, axis } => {
                    let x = self.value(*a);
                    let (outer, mid, inner) = split_at_axis(x.shape(), *axis);
                    let mut dx = Tensor::zeros(x.shape());
                    for o in 0..outer {
                        for m in 0..mid {
                            let dst = (o * mid + m) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                dx.data_mut()[dst + i] = g.data()[src + i];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::SumAll { a } => {
                    let s = g.scalar_value();
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), s))?;
                }
                Op::Reshape { a, from } => {
                    accumulate(&mut grads, *a, g.reshape(from)?)?;
                }
                Op::Permute { a, axes } => {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    accumulate(&mut grads, *a, g.permute(&inverse)?)?;
                }
                Op::CrossEntropy { logits, labels } => {
                    let z = self.value(*logits);
                    let (m, v) = (z.shape()[0], z.shape()[1]);
                    let gs = g.scalar_value().to_f64() / m as f64;
                    let mut dz = Tensor::zeros(z.shape());
                    for i in 0..m {
                        let row = &z.data()[i * v..(i + 1) * v];
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            let p = (row[j].to_f64() - lse).exp();
                            let delta = if j == labels[i] { 1.0 } else { 0.0 };
                            dz.data_mut()[i * v + j] = T::from_f64((p - delta) * gs);
                        }
                    }
                    accumulate(&mut grads, *logits, dz)?;
                }
                Op::AbsToRel { a } => {
                    let l = self.value(*a).shape()[0];
                    let mut dx = Tensor::zeros(&[l, l]);
                    for i in 0..l {
                        for j in 0..l {
                            let r = j + l - 1 - i;
                            dx.data_mut()[i * l + j] = g.data()[i * (2 * l - 1) + r];
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::RelToAbs { a } => {
                    let l = self.value(*a).shape()[0];
                    let mut dx = Tensor::zeros(&[l, 2 * l - 1]);
                    for i in 0..l {
                        for j in 0..l {
                            let r = j + l - 1 - i;
                            dx.data_mut()[i * (2 * l - 1) + r] = g.data()[i * l + j];
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    delta: Tensor<T>,
) -> Result<()> {
    grads[id.0] = Some(match grads[id.0].take() {
        Some(existing) => existing.add(&delta)?,
        None => delta,
    });
    Ok(())
}

// ── scalar kernels ──────────────────────────────────────────────────

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// tanh-form GELU as used by the original BERT implementation.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    T::from_f64(gelu_f64(x.to_f64()))
}

fn gelu_f64(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row
        .iter()
        .map(|x| x.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = row.iter().map(|x| (x.to_f64() - max).exp()).sum();
    max + sum.ln()
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, mid, inner) = split_at_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    for o in 0..outer {
        for i in 0..inner {
            let index = |m: usize| (o * mid + m) * inner + i;
            let mut max = T::neg_infinity();
            for m in 0..mid {
                let v = x.data()[index(m)];
                if v > max {
                    max = v;
                }
            }
            if !max.is_finite() {
                // Fully masked slice: all-zero output by convention.
                continue;
            }
            let mut sum = T::ZERO;
            for m in 0..mid {
                // exp(-inf - max) underflows to exactly 0 for masked slots.
                let e = (x.data()[index(m)] - max).exp();
                out.data_mut()[index(m)] = e;
                sum = sum + e;
            }
            for m in 0..mid {
                out.data_mut()[index(m)] = out.data()[index(m)] / sum;
            }
        }
    }
    out
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, mid, inner) = split_at_axis(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    for o in 0..outer {
        for i in 0..inner {
            let index = |m: usize| (o * mid + m) * inner + i;
            let mut dot = T::ZERO;
            for m in 0..mid {
                dot = dot + dy.data()[index(m)] * y.data()[index(m)];
            }
            for m in 0..mid {
                let idx = index(m);
                dx.data_mut()[idx] = y.data()[idx] * (dy.data()[idx] - dot);
            }
        }
    }
    dx
}

fn l2_normalize_forward<T: Scalar>(x: &Tensor<T>, axis: usize, eps: T) -> Tensor<T> {
    let (outer, mid, inner) = split_at_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    for o in 0..outer {
        for i in 0..inner {
            let index = |m: usize| (o * mid + m) * inner + i;
            let mut ss = eps * eps;
            for m in 0..mid {
                let v = x.data()[index(m)];
                ss = ss + v * v;
            }
            let norm = ss.sqrt();
            for m in 0..mid {
                let idx = index(m);
                out.data_mut()[idx] = x.data()[idx] / norm;
            }
        }
    }
    out
}

fn l2_normalize_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, axis: usize, eps: T) -> Tensor<T> {
    let (outer, mid, inner) = split_at_axis(x.shape(), axis);
    let mut dx = Tensor::zeros(x.shape());
    for o in 0..outer {
        for i in 0..inner {
            let index = |m: usize| (o * mid + m) * inner + i;
            let mut ss = eps * eps;
            let mut dot = T::ZERO;
            for m in 0..mid {
                let idx = index(m);
                ss = ss + x.data()[idx] * x.data()[idx];
                dot = dot + dy.data()[idx] * x.data()[idx];
            }
            let norm = ss.sqrt();
            let cube = norm * norm * norm;
            for m in 0..mid {
                let idx = index(m);
                dx.data_mut()[idx] = dy.data()[idx] / norm - x.data()[idx] * dot / cube;
            }
        }
    }
    dx
}

fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d;
    let mut out = Tensor::zeros(x.shape());
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let (mean, var) = mean_var(row);
        let inv = T::ONE / (var + eps).sqrt();
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            out.data_mut()[r * d + j] = gain.data()[j] * xhat + bias.data()[j];
        }
    }
    out
}

fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d;
    let dn = T::from_f64(d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let gy = &dy.data()[r * d..(r + 1) * d];
        let (mean, var) = mean_var(row);
        let inv = T::ONE / (var + eps).sqrt();
        let mut sum_dxhat = T::ZERO;
        let mut sum_dxhat_xhat = T::ZERO;
        let mut xhat = vec![T::ZERO; d];
        let mut dxhat = vec![T::ZERO; d];
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv;
            dxhat[j] = gy[j] * gain.data()[j];
            sum_dxhat = sum_dxhat + dxhat[j];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
            dgain.data_mut()[j] = dgain.data()[j] + gy[j] * xhat[j];
            dbias.data_mut()[j] = dbias.data()[j] + gy[j];
        }
        for j in 0..d {
            let term = dxhat[j] - sum_dxhat / dn - xhat[j] * sum_dxhat_xhat / dn;
            dx.data_mut()[r * d + j] = inv * term;
        }
    }
    (dx, dgain, dbias)
}

fn mean_var<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &v in row {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = T::ZERO;
    for &v in row {
        let c = v - mean;
        var = var + c * c;
    }
    (mean, var / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut g = Graph::new();
        let w = g.param(t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]));
        let loss = g.sum_all(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_square_sum_gradient_is_the_param() {
        let mut g = Graph::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let w = g.param(t64(&[2, 2], &data));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &data);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.param(t64(&[2], &[1.0, 2.0]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn softmax_symmetric_and_masked() {
        let mut g = Graph::new();
        let a = g.input(t64(&[2], &[0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.input(t64(&[2], &[f64::NEG_INFINITY, 0.0]));
        let sb = g.softmax(b, 0).unwrap();
        assert_eq!(g.value(sb).data(), &[0.0, 1.0]);

        // Fully masked row: all zeros, not NaN.
        let c = g.input(t64(&[1, 2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]));
        let sc = g.softmax(c, 1).unwrap();
        assert_eq!(g.value(sc).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        // Oracle: direct exp/sum evaluation in f64.
        let xs = [1.0, 2.0, 3.0];
        let exps: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let mut g = Graph::new();
        let a = g.input(t64(&[3], &xs));
        let s = g.softmax(a, 0).unwrap();
        for (got, want) in g.value(s).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-15);
        }
        let sum: f64 = g.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        let mut g = Graph::new();
        let a = g.input(t64(&[4], &[0.0, 50.0, -50.0, 1.0]));
        let s = g.sigmoid(a);
        let v = g.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!(v[2] > 0.0 && v[2] < 1e-20);
        // 1/(1+e^-1), frozen from high-precision evaluation.
        assert!((v[3] - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let a = g.input(t64(&[2], &[3.0, 4.0]));
        let n = g.l2_normalize(a, 0, 1e-12).unwrap();
        let v = g.value(n).data();
        assert!((v[0] - 0.6).abs() < 1e-9 && (v[1] - 0.8).abs() < 1e-9);

        // All-zero row stays all-zero thanks to the eps guard.
        let z = g.input(Tensor::zeros(&[3]));
        let nz = g.l2_normalize(z, 0, 1e-6).unwrap();
        assert_eq!(g.value(nz).data(), &[0.0, 0.0, 0.0]);

        let ones = g.input(t64(&[4], &[1.0, 1.0, 1.0, 1.0]));
        let no = g.l2_normalize(ones, 0, 1e-12).unwrap();
        for &x in g.value(no).data() {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_and_already_normalized() {
        let mut g = Graph::new();
        let gain = g.input(t64(&[2], &[1.0, 1.0]));
        let bias = g.input(t64(&[2], &[0.0, 0.0]));
        let c = g.input(t64(&[1, 2], &[5.0, 5.0]));
        let ln = g.layer_norm(c, gain, bias).unwrap();
        for &x in g.value(ln).data() {
            assert!(x.abs() < 1e-5);
        }
        let pm = g.input(t64(&[1, 2], &[1.0, -1.0]));
        let ln2 = g.layer_norm(pm, gain, bias).unwrap();
        let v = g.value(ln2).data();
        assert!((v[0] - 1.0).abs() < 1e-6 && (v[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::new(17);
        let row: Vec<f64> = (0..8).map(|_| rng.normal() * 2.0 + 0.3).collect();
        let gain: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let bias: Vec<f64> = (0..8).map(|_| rng.normal()).collect();

        // Two-pass mean/variance oracle.
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
        let expect: Vec<f64> = row
            .iter()
            .zip(gain.iter().zip(&bias))
            .map(|(x, (g, b))| g * (x - mean) / (var + 1e-12).sqrt() + b)
            .collect();

        let mut g = Graph::new();
        let gn = g.input(t64(&[8], &gain));
        let bn = g.input(t64(&[8], &bias));
        let xn = g.input(t64(&[1, 8], &row));
        let ln = g.layer_norm(xn, gn, bn).unwrap();
        for (got, want) in g.value(ln).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_and_cross_entropy_roundtrip() {
        let mut g = Graph::new();
        let table = g.param(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = g.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(picked);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let mut g2 = Graph::<f64>::new();
        let logits = g2.param(Tensor::zeros(&[2, 4]));
        let loss = g2.cross_entropy(logits, &[1, 3]).unwrap();
        // Uniform logits: loss = ln(4).
        assert!((g2.value(loss).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn abs_rel_roundtrip() {
        let mut g = Graph::new();
        let x = g.input(t64(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let rel = g.abs_to_rel(x).unwrap();
        assert_eq!(g.value(rel).shape(), &[3, 5]);
        // Row 0 owns offsets 0..2 at slots 2..4.
        assert_eq!(&g.value(rel).data()[..5], &[0.0, 0.0, 1.0, 2.0, 3.0]);
        let back = g.rel_to_abs(rel).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut rng = Rng::new(23);
        let mut g = Graph::new();
        let w = g.param(Tensor::from_fn(&[4, 4], |_| rng.normal()));
        let x = g.input(Tensor::from_fn(&[4, 4], |_| rng.normal()));
        let y = g.matmul(x, w).unwrap();
        let s = g.softmax(y, 1).unwrap();
        let l = g.sum_all(s);
        let g1 = g.backward(l).unwrap();
        let g2 = g.backward(l).unwrap();
        assert_eq!(g1.get(w).unwrap().data(), g2.get(w).unwrap().data());
    }
}
