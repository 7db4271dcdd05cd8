// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f32` kernels on contiguous row-major buffers.
//!
//! Just enough linear algebra for a DistilBERT-shaped forward pass:
//! matrix products (plain and against a transposed `[out, in]` weight),
//! row softmax with max subtraction, per-row layer normalization and the
//! exact erf-based GELU. Everything accumulates in `f32` and visits
//! elements in a fixed order, so identical inputs give bit-identical
//! outputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A dense row-major tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` is non-degenerate and matches the buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(alloc::format!("invalid tensor shape {shape:?}: every dimension must be >= 1")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(alloc::format!(
                "shape {shape:?} needs {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// A 1-D tensor.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// A 2-D tensor from `rows × cols` row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::matrix(n, n, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of rows when viewed as `[rows × last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(alloc::format!("{what}: expected a 2-D tensor, got shape {other:?}"))),
        }
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(alloc::format!("matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Dot product with eight interleaved partial sums, reduced in a fixed order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0.0f32;
    for j in chunks * 8..a.len() {
        tail += a[j] * b[j];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Affine map `x[r×in] · wᵀ + bias` where `weight` is stored `[out × in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, din) = x.dims2("linear input")?;
    let (dout, win) = weight.dims2("linear weight")?;
    if din != win {
        return Err(Error::Shape(alloc::format!("linear: input width {din} does not match weight [{dout}x{win}]")));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::Shape(alloc::format!(
                "linear: bias shape {:?} does not match output width {dout}",
                b.shape()
            )));
        }
    }
    let mut out = vec![0.0f32; rows * dout];
    for r in 0..rows {
        let xr = x.row(r);
        let orow = &mut out[r * dout..(r + 1) * dout];
        for (j, slot) in orow.iter_mut().enumerate() {
            *slot = dot(xr, weight.row(j));
        }
        if let Some(b) = bias {
            for (slot, &bv) in orow.iter_mut().zip(b.data()) {
                *slot += bv;
            }
        }
    }
    Tensor::matrix(rows, dout, out)
}

/// Softmax along `axis`, computed with max subtraction.
///
/// Non-finite inputs are rejected with [`Error::Numeric`].
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(alloc::format!("softmax axis {axis} out of range for shape {shape:?}")));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    let mut lane = vec![0.0f32; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = src[base + j * inner];
            }
            softmax_in_place(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                out[base + j * inner] = *v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Row softmax in place. The slice must be non-empty and finite.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the entries whose `keep` flag is set; the rest get weight 0.
///
/// At least one entry must be kept.
pub fn masked_softmax_in_place(row: &mut [f32], keep: &[bool]) {
    debug_assert_eq!(row.len(), keep.len());
    let max = row.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (v, &k) in row.iter_mut().zip(keep) {
        if k {
            *v = libm::expf(*v - max);
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row normalization over the last dimension followed by `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Shape(alloc::format!(
            "layer_norm: gamma {:?} / beta {:?} must both be [{d}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Numeric(alloc::format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        layer_norm_row(out.row_mut(r), gamma.data(), beta.data(), eps);
    }
    Ok(out)
}

pub(crate) fn layer_norm_row(row: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let d = row.len() as f32;
    let mean = row.iter().sum::<f32>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    let inv = 1.0 / libm::sqrtf(var + eps);
    for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
        *v = (*v - mean) * inv * g + b;
    }
}

/// Exact GELU, `x·Φ(x)`, evaluated through `erf` in double precision.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    let xd = x as f64;
    (0.5 * xd * (1.0 + libm::erf(xd * core::f64::consts::FRAC_1_SQRT_2))) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_projector() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i2 = Tensor::identity(2).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap(), a);
        let p = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = m(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&p, &b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = m(2, 3, &[0.0; 6]);
        let b = m(2, 3, &[0.0; 6]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_matches_matmul_with_transpose() {
        let x = m(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        let w = m(2, 3, &[0.1, 0.2, 0.3, -1.0, 0.5, 2.0]);
        let wt = m(3, 2, &[0.1, -1.0, 0.2, 0.5, 0.3, 2.0]);
        let b = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let got = linear(&x, &w, Some(&b)).unwrap();
        let mm = matmul(&x, &wt).unwrap();
        for (g, e) in got.data().iter().zip(mm.data().iter().zip([1.0, -1.0, 1.0, -1.0])) {
            assert!((g - (e.0 + e.1)).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let s = softmax(&Tensor::vector(vec![0.0; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_columns() {
        let x = m(2, 2, &[0.0, 5.0, 0.0, 5.0]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::vector(vec![f32::NAN, 1.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(Error::Numeric(_))));
        assert!(softmax(&Tensor::vector(vec![1.0]).unwrap(), 1).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut row = [1.0, 50.0, 2.0];
        masked_softmax_in_place(&mut row, &[true, false, true]);
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_limits() {
        let x = m(1, 4, &[3.0; 4]);
        let ones = Tensor::vector(vec![1.0; 4]).unwrap();
        let zeros = Tensor::vector(vec![0.0; 4]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = m(1, 4, &[1.0, -7.0, 2.5, 9.0]);
        let b = Tensor::vector(vec![0.25, -1.0, 3.0, 0.0]).unwrap();
        let y = layer_norm(&x, &zeros, &b, 1e-12).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn layer_norm_rejects_bad_params() {
        let x = m(1, 2, &[1.0, 2.0]);
        let v = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert!(layer_norm(&x, &v, &v, 0.0).is_err());
        let short = Tensor::vector(vec![1.0]).unwrap();
        assert!(layer_norm(&x, &short, &v, 1e-5).is_err());
    }

    #[test]
    fn gelu_asymptotes() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
    }
}
