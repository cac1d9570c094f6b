//! Dense row-major tensors over f32/f64, with the handful of primitives the
//! attention formulas need: batched matmul, broadcasting elementwise ops,
//! axis reductions, permute/reshape.

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Element type for tensors: f32 for training, f64 for the verification
/// suites (gradient checks, oracle comparisons).
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense row-major tensor. `data.len()` always equals the shape product.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    /// Identity matrix of extent n.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row-major flat index of a multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        flat
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let flat = self.flat_index(idx);
        self.data[flat] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape_mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorder axes; `axes` must be a permutation of 0..rank.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        if axes.len() != r {
            return Err(Error::Shape(format!(
                "permute axes {axes:?} for rank {r} tensor"
            )));
        }
        let mut seen = vec![false; r];
        for &a in axes {
            if a >= r || seen[a] {
                return Err(Error::Shape(format!(
                    "permute axes {axes:?} not a permutation"
                )));
            }
            seen[a] = true;
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let old_strides = strides(&self.shape);
        let new_strides_src: Vec<usize> = axes.iter().map(|&a| old_strides[a]).collect();
        let numel = self.data.len();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; r];
        for _ in 0..numel {
            let mut src = 0;
            for d in 0..r {
                src += idx[d] * new_strides_src[d];
            }
            data.push(self.data[src]);
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < new_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor {
            shape: new_shape,
            data,
        })
    }

    /// Swap the last two axes (matrix transpose over the batch).
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape
            )));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Batched matrix product. Shapes `[..b, p, q] x [..b, q, r] -> [..b, p, r]`;
    /// the leading batch axes must agree, or one operand may omit them
    /// entirely and is broadcast across the other's batch.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self, other);
        if a.rank() < 2 || b.rank() < 2 {
            return Err(Error::shape_mismatch("matmul", &a.shape, &b.shape));
        }
        let (p, qa) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
        let (qb, r) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
        if qa != qb {
            return Err(Error::shape_mismatch("matmul", &a.shape, &b.shape));
        }
        let batch_a = &a.shape[..a.rank() - 2];
        let batch_b = &b.shape[..b.rank() - 2];
        let batch: Vec<usize> = if batch_a == batch_b {
            batch_a.to_vec()
        } else if batch_a.is_empty() {
            batch_b.to_vec()
        } else if batch_b.is_empty() {
            batch_a.to_vec()
        } else {
            return Err(Error::shape_mismatch("matmul batch", &a.shape, &b.shape));
        };
        let nbatch: usize = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.push(p);
        out_shape.push(r);
        let mut out = vec![T::ZERO; nbatch * p * r];
        let a_stride = if batch_a.is_empty() { 0 } else { p * qa };
        let b_stride = if batch_b.is_empty() { 0 } else { qa * r };
        for n in 0..nbatch {
            let am = &a.data[n * a_stride..n * a_stride + p * qa];
            let bm = &b.data[n * b_stride..n * b_stride + qa * r];
            let cm = &mut out[n * p * r..(n + 1) * p * r];
            matmul_slice(am, bm, cm, p, qa, r);
        }
        Tensor::new(out_shape, out)
    }

    /// Elementwise binary op with trailing-axis broadcasting (extents must
    /// match or be 1).
    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        let shape = broadcast_shape(&self.shape, &other.shape)?;
        let r = shape.len();
        let a_pad = pad_left(&self.shape, r);
        let b_pad = pad_left(&other.shape, r);
        let a_strides = broadcast_strides(&a_pad, &shape);
        let b_strides = broadcast_strides(&b_pad, &shape);
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; r];
        for _ in 0..numel {
            let mut af = 0;
            let mut bf = 0;
            for d in 0..r {
                af += idx[d] * a_strides[d];
                bf += idx[d] * b_strides[d];
            }
            data.push(f(self.data[af], other.data[bf]));
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor::new(shape, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Sum along one axis (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!(
                "sum_axis {axis} out of range for {:?}",
                self.shape
            )));
        }
        let (outer, mid, inner) = split_at_axis(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] = out[dst + i] + self.data[base + i];
                }
            }
        }
        Tensor::new(shape, out)
    }

    pub fn sum_all(&self) -> T {
        let mut s = T::ZERO;
        for &x in &self.data {
            s = s + x;
        }
        s
    }

    /// Reduce a broadcast result gradient back to the original operand shape
    /// by summing over the broadcast axes.
    pub fn reduce_to_shape(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let r = self.rank();
        let t_pad = pad_left(target, r);
        let numel_t: usize = target.iter().product();
        let mut out = vec![T::ZERO; numel_t];
        let t_strides_full = strides(&t_pad);
        let mut idx = vec![0usize; r];
        for flat in 0..self.data.len() {
            let mut tf = 0;
            for d in 0..r {
                let c = if t_pad[d] == 1 { 0 } else { idx[d] };
                tf += c * t_strides_full[d];
            }
            out[tf] = out[tf] + self.data[flat];
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor::new(target.to_vec(), out)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.to_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(src: &Tensor<f64>) -> Tensor<T> {
        Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `C[p,r] += A[p,q] x B[q,r]` on flat row-major slices; i-k-j order keeps the
/// inner loop contiguous so it vectorizes.
fn matmul_slice<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let c_row = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let b_row = &b[k * r..(k + 1) * r];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

/// Stride per output axis for reading a (padded) operand under broadcasting;
/// broadcast axes get stride 0.
fn broadcast_strides(padded: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(padded);
    padded
        .iter()
        .zip(out)
        .zip(own)
        .map(|((&p, &o), s)| if p == o { s } else { 0 })
        .collect()
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let a_pad = pad_left(a, r);
    let b_pad = pad_left(b, r);
    let mut out = Vec::with_capacity(r);
    for d in 0..r {
        let (da, db) = (a_pad[d], b_pad[d]);
        if da == db || da == 1 || db == 1 {
            out.push(da.max(db));
        } else {
            return Err(Error::shape_mismatch("broadcast", a, b));
        }
    }
    Ok(out)
}

/// (outer, mid, inner) extents around `axis`.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}
