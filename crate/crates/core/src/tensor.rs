// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! All reductions accumulate in `f64` in ascending index order and round to
//! the storage type once, so results are bit-reproducible across runs.
//! The element type is generic so that gradient checking can run the very
//! same code in double precision.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon inside the RMS normalization square root.
pub const RMS_EPS: f64 = 1e-6;

/// Storage scalar: `f32` in production, `f64` for gradient checks.
pub trait Real:
    num_traits::Float + Debug + Default + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::param(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Matrix product with `f64` accumulation in ascending inner-index order.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    Ok(Tensor {
        shape: vec![m, n],
        data: matmul_slices(&a.data, &b.data, m, k, n),
    })
}

/// Row-wise softmax with max subtraction. A 1-D tensor is treated as one row.
///
/// Entries equal to `-inf` receive probability exactly 0 as long as each row
/// holds at least one finite value.
pub fn softmax_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let cols = a.cols();
    let mut data = Vec::with_capacity(a.data.len());
    for r in 0..a.rows() {
        data.extend(softmax_slice(&a.data[r * cols..(r + 1) * cols]));
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

/// `x / sqrt(mean(x^2) + 1e-6) * gain`.
pub fn rms_layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data.len() != gain.data.len() {
        return Err(Error::Dimension {
            op: "rms_layer_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    let (y, _) = rms_norm_slice(&x.data, &gain.data);
    Ok(Tensor {
        shape: x.shape.clone(),
        data: y,
    })
}

/// Cosine similarity; 0 when either norm is below 1e-12.
pub fn cosine<T: Real>(u: &Tensor<T>, v: &Tensor<T>) -> Result<f64> {
    if u.data.len() != v.data.len() {
        return Err(Error::Dimension {
            op: "cosine",
            left: u.shape.clone(),
            right: v.shape.clone(),
        });
    }
    Ok(cosine_slices(&u.data, &v.data))
}

/// Indices of the `k` largest scores, ordered by descending score with ties
/// going to the lower index.
pub fn top_k_indices<T: Real>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::param(format!(
            "top-k requires 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps ascending index order among equal scores.
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx.truncate(k);
    Ok(idx)
}

// ---------------------------------------------------------------------------
// Slice kernels used by the model and its backward pass.

pub(crate) fn matmul_slices<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let av = av.as_f64();
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(b_row) {
                *s += av * bv.as_f64();
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    out
}

/// `x · W` for a single row `x` of length `k` and `W: k × n`.
#[inline]
pub(crate) fn vec_mat<T: Real>(x: &[T], w: &[T], n: usize) -> Vec<T> {
    matmul_slices(x, w, 1, x.len(), n)
}

/// `dy · Wᵀ` given the pre-transposed `Wt: n × k`, as a row of length `k`.
///
/// Backward-only; accumulates in the storage type in ascending `j` order.
pub(crate) fn vec_mat_t<T: Real>(dy: &[T], wt: &[T], k: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); k];
    for (j, &d) in dy.iter().enumerate() {
        if d == T::zero() {
            continue;
        }
        for (a, &w) in acc.iter_mut().zip(&wt[j * k..(j + 1) * k]) {
            *a += d * w;
        }
    }
    acc
}

/// Transpose of a row-major `rows × cols` matrix.
pub(crate) fn transpose<T: Real>(w: &Tensor<T>) -> Tensor<T> {
    if w.shape.len() != 2 {
        return w.clone();
    }
    let (r, c) = (w.shape[0], w.shape[1]);
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = w.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

/// Dot product in the storage type with eight fixed-order partial sums.
#[inline]
pub(crate) fn dot_native<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut lanes = [T::zero(); 8];
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

/// `G += xᵀ · dy` for a single row pair.
pub(crate) fn outer_acc<T: Real>(g: &mut [T], x: &[T], dy: &[T]) {
    let n = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        for (gv, &d) in g[i * n..(i + 1) * n].iter_mut().zip(dy) {
            *gv += xi * d;
        }
    }
}

/// Dot product in `f64` with eight interleaved partial sums combined in a
/// fixed order; deterministic, and not bound by add latency.
#[inline]
pub(crate) fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let mut tail = 0.0f64;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x.as_f64() * y.as_f64();
    }
    let mut lanes = [0.0f64; 8];
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l].as_f64() * y[l].as_f64();
        }
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

pub(crate) fn softmax_slice<T: Real>(x: &[T]) -> Vec<T> {
    let max = x
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::from_f64(e / sum)).collect()
}

/// Gradient of softmax: `dz_i = p_i (dp_i - Σ_j p_j dp_j)`.
pub(crate) fn softmax_backward<T: Real>(p: &[T], dp: &[T]) -> Vec<T> {
    let inner = dot_f64(p, dp);
    p.iter()
        .zip(dp)
        .map(|(&pi, &di)| T::from_f64(pi.as_f64() * (di.as_f64() - inner)))
        .collect()
}

/// Returns the normalized row and `1/rms`.
pub(crate) fn rms_norm_slice<T: Real>(x: &[T], gain: &[T]) -> (Vec<T>, f64) {
    let ms = x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    let y = x
        .iter()
        .zip(gain)
        .map(|(&v, &g)| T::from_f64(v.as_f64() * inv * g.as_f64()))
        .collect();
    (y, inv)
}

/// Backward of [`rms_norm_slice`]; accumulates into `dgain`, returns `dx`.
pub(crate) fn rms_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    inv: f64,
    dy: &[T],
    dgain: &mut [T],
) -> Vec<T> {
    let d = x.len() as f64;
    let mut proj = 0.0f64;
    for i in 0..x.len() {
        let xi = x[i].as_f64();
        let dyi = dy[i].as_f64();
        dgain[i] += T::from_f64(dyi * xi * inv);
        proj += dyi * gain[i].as_f64() * xi;
    }
    let c = inv * inv * inv * proj / d;
    x.iter()
        .zip(gain)
        .zip(dy)
        .map(|((&xi, &gi), &dyi)| T::from_f64(inv * dyi.as_f64() * gi.as_f64() - c * xi.as_f64()))
        .collect()
}

pub(crate) fn cosine_slices<T: Real>(u: &[T], v: &[T]) -> f64 {
    let su = dot_f64(u, u);
    let sv = dot_f64(v, v);
    if su < 1e-24 || sv < 1e-24 {
        return 0.0;
    }
    // sqrt(fl(s * s)) == s, so identical inputs give exactly 1.
    (dot_f64(u, v) / (su * sv).sqrt()).clamp(-1.0, 1.0)
}

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

#[inline]
pub(crate) fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// First index of the maximum; NaN entries are never chosen.
pub(crate) fn argmax<T: Real>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
