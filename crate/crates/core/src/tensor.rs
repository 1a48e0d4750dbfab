//! Dense row-major tensors and the raw kernels shared by the taped graph
//! and the tape-free inference path.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; gradient checks
/// rerun the same code in `f64`.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A dense tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(vec![v])
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    /// Tensors that do not require grad ignore the call.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        if !self.requires_grad {
            return;
        }
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Converts element type, dropping any gradient.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Rows and columns when viewed as a matrix; vectors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        matrix_dims(&self.shape)
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape.iter().product::<usize>() / cols, cols)
        }
    }
}

/// Raw kernels over row-major slices. Output buffers are accumulated into
/// (`+=`) unless the name says otherwise.
pub mod kernels {
    use super::Real;

    /// Dot product with eight independent accumulators so the reduction
    /// vectorizes without reassociation flags.
    #[inline]
    pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [T::zero(); 8];
        let chunks = a.len() / 8;
        for c in 0..chunks {
            let xa = &a[c * 8..c * 8 + 8];
            let xb = &b[c * 8..c * 8 + 8];
            for l in 0..8 {
                acc[l] = acc[l] + xa[l] * xb[l];
            }
        }
        let mut tail = T::zero();
        for i in chunks * 8..a.len() {
            tail = tail + a[i] * b[i];
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }

    #[inline]
    pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = *yi + alpha * xi;
        }
    }

    /// out(m,n) += a(m,k) · b(k,n)
    pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av != T::zero() {
                    axpy(av, &b[p * n..(p + 1) * n], row);
                }
            }
        }
    }

    /// out(m,n) += a(m,k) · b(n,k)ᵀ
    pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + dot(ar, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// out(k,n) += a(m,k)ᵀ · b(m,n)
    pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for p in 0..m {
            let br = &b[p * n..(p + 1) * n];
            for i in 0..k {
                let av = a[p * k + i];
                if av != T::zero() {
                    axpy(av, br, &mut out[i * n..(i + 1) * n]);
                }
            }
        }
    }

    /// In-place softmax over each row of width `n`, max-subtracted.
    pub fn softmax_rows<T: Real>(x: &mut [T], n: usize) {
        for row in x.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
    }

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    /// Row-wise layer norm. Writes the normalized-and-affine result into
    /// `out`; when `cache` is given, stores x̂ and 1/σ per row for backward.
    pub fn layer_norm_rows<T: Real>(
        x: &[T],
        gamma: &[T],
        beta: &[T],
        out: &mut [T],
        n: usize,
        mut cache: Option<(&mut [T], &mut [T])>,
    ) {
        let eps = T::lit(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        for (r, (xr, or)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mean = xr.iter().copied().sum::<T>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for j in 0..n {
                let xh = (xr[j] - mean) * inv;
                or[j] = gamma[j] * xh + beta[j];
                if let Some((xhat, _)) = cache.as_mut() {
                    xhat[r * n + j] = xh;
                }
            }
            if let Some((_, invs)) = cache.as_mut() {
                invs[r] = inv;
            }
        }
    }

    pub fn relu<T: Real>(x: &mut [T]) {
        for v in x {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }

    /// y(m,n) = x(m,k) · w(n,k)ᵀ + b, the usual `Linear` with (out, in) weights.
    pub fn linear<T: Real>(x: &[T], w: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b);
        }
        matmul_bt_acc(x, w, &mut out, m, k, n);
        out
    }

    pub fn argmax<T: Real>(x: &[T]) -> usize {
        let mut best = 0;
        for (i, &v) in x.iter().enumerate() {
            if v > x[best] {
                best = i;
            }
        }
        best
    }
}
