//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Values are always held as `f64`. A tensor tagged [`DType::F32`] keeps
//! every stored value rounded to single precision, and results of any
//! operation inherit the tag of their first operand.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::complexity::{MacSink, OpKind};
use crate::error::{shape_err, Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DType {
    /// Single precision storage.
    F32,
    /// Double precision storage (default).
    #[default]
    F64,
}

impl DType {
    /// Width of one element in bytes.
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

/// Seed for deterministic initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seed(pub u64);

/// Dense row-major tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config(alloc::format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_extents(&shape)?;
        if numel_of(&shape) != data.len() {
            return Err(shape_err("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            dtype: DType::F64,
        })
    }

    /// Tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor extents must be positive, got {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
            dtype: DType::F64,
        }
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Tensor whose element at flat index `i` is `f(i)`.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data = (0..t.data.len()).map(f).collect();
        t
    }

    // Internal constructor: shape already validated, values rounded to dtype.
    fn raw(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        if dtype == DType::F32 {
            for v in &mut data {
                *v = dtype.round(*v);
            }
        }
        Self { shape, data, dtype }
    }

    /// Extents.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Row-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable row-major values. Writes are not re-rounded for `F32` tensors.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the tensor, returning its values.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of elements.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of axes.
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Storage precision.
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Copy stored at the requested precision.
    pub fn cast(&self, dtype: DType) -> Self {
        Self::raw(self.shape.clone(), self.data.clone(), dtype)
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_extents(shape)?;
        if numel_of(shape) != self.numel() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            dtype: self.dtype,
        })
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.dtype,
        )
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("zip_with", &self.shape, &other.shape));
        }
        Ok(Self::raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            self.dtype,
        ))
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Multiplies every element by `k`.
    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// Sum of all elements, left to right.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max))
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds a row vector (the last axis) to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Self> {
        let width = *self.shape.last().unwrap();
        if row.numel() != width {
            return Err(shape_err("add_row", &self.shape, &row.shape));
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(width) {
            for (v, &b) in chunk.iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        Ok(Self::raw(self.shape.clone(), data, self.dtype))
    }

    /// Channels `[start, start + len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let width = *self.shape.last().unwrap();
        if len == 0 || start + len > width {
            return Err(shape_err("slice_last", &self.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(self.numel() / width * len);
        for chunk in self.data.chunks(width) {
            data.extend_from_slice(&chunk[start..start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(Self::raw(shape, data, self.dtype))
    }

    /// Writes `src` into channels `[start, start + src_width)` of the last axis.
    pub fn assign_last(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let width = *self.shape.last().unwrap();
        let len = *src.shape.last().unwrap();
        let lead_ok = self.shape[..self.rank() - 1] == src.shape[..src.rank() - 1];
        if !lead_ok || start + len > width {
            return Err(shape_err("assign_last", &self.shape, &src.shape));
        }
        for (dst, s) in self.data.chunks_mut(width).zip(src.data.chunks(len)) {
            dst[start..start + len].copy_from_slice(s);
        }
        Ok(())
    }
}

/// Matrix product over the last two axes.
///
/// `a` is `[.., p, q]`; `b` is either `[.., q, r]` with identical leading
/// extents or a plain `[q, r]` matrix shared by every batch slice. Each output
/// element accumulates its `q` products left to right starting from zero.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_tracked(a, b, OpKind::Untracked, &mut ())
}

/// [`matmul`] that reports `batch·p·q·r` multiply-adds to `sink`.
///
/// This is the single instrumentation point for empirical MAC counting.
pub fn matmul_tracked(
    a: &Tensor,
    b: &Tensor,
    kind: OpKind,
    sink: &mut dyn MacSink,
) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(shape_err("matmul", &a.shape, &b.shape));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (p, q) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (q2, r) = (b.shape[rb - 2], b.shape[rb - 1]);
    let shared_rhs = rb == 2;
    if q != q2 || (!shared_rhs && a.shape[..ra - 2] != b.shape[..rb - 2]) {
        return Err(shape_err("matmul", &a.shape, &b.shape));
    }
    let batch: usize = a.shape[..ra - 2].iter().product();
    let mut out = vec![0.0; batch * p * r];
    for bi in 0..batch {
        let lhs = &a.data[bi * p * q..(bi + 1) * p * q];
        let rhs = if shared_rhs {
            &b.data[..]
        } else {
            &b.data[bi * q * r..(bi + 1) * q * r]
        };
        let dst = &mut out[bi * p * r..(bi + 1) * p * r];
        for i in 0..p {
            let row = &mut dst[i * r..(i + 1) * r];
            for k in 0..q {
                let av = lhs[i * q + k];
                let brow = &rhs[k * r..(k + 1) * r];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    sink.record(kind, (batch * p * q * r) as u64);
    let mut shape = a.shape[..ra - 2].to_vec();
    shape.extend_from_slice(&[p, r]);
    Ok(Tensor::raw(shape, out, a.dtype))
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        return Err(shape_err("transpose_last2", &x.shape, &[]));
    }
    let (p, q) = (x.shape[rank - 2], x.shape[rank - 1]);
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data.chunks(p * q).zip(out.chunks_mut(p * q)) {
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(rank - 2, rank - 1);
    Ok(Tensor::raw(shape, out, x.dtype))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let width = *x.shape.last().unwrap();
    let mut out = x.data.clone();
    for row in out.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::raw(x.shape.clone(), out, x.dtype)
}

/// Exact GELU: `0.5·x·(1 + erf(x/√2))`, evaluated as `0.5·x·erfc(−x/√2)` so
/// the negative tail does not cancel to zero.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Scalar GELU.
pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * libm::erfc(-v * core::f64::consts::FRAC_1_SQRT_2)
}

/// Derivative of the exact GELU: `Φ(x) + x·φ(x)`.
pub fn gelu_derivative(v: f64) -> f64 {
    let cdf = 0.5 * libm::erfc(-v * core::f64::consts::FRAC_1_SQRT_2);
    let pdf = libm::exp(-0.5 * v * v) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + v * pdf
}

/// Layer normalization over the last axis using the population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let width = *x.shape.last().unwrap();
    if gamma.numel() != width || beta.numel() != width {
        return Err(shape_err("layer_norm", &x.shape, &gamma.shape));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(width) {
        let (mean, inv_std) = row_stats(row, eps);
        for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(Tensor::raw(x.shape.clone(), out, x.dtype))
}

/// Mean and `1/sqrt(var + eps)` of one row (population variance).
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + eps))
}

/// Copies frames `idx` (first axis) of `x` in the given order.
pub fn gather_frames(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let frames = x.shape[0];
    let frame_len = x.numel() / frames;
    let mut seen = vec![false; frames];
    let mut data = Vec::with_capacity(idx.len() * frame_len);
    for &t in idx {
        if t >= frames || seen[t] {
            return Err(Error::Index {
                index: t,
                bound: frames,
            });
        }
        seen[t] = true;
        data.extend_from_slice(&x.data[t * frame_len..(t + 1) * frame_len]);
    }
    if idx.is_empty() {
        return Err(shape_err("gather_frames", &x.shape, &[0]));
    }
    let mut shape = x.shape.clone();
    shape[0] = idx.len();
    Ok(Tensor::raw(shape, data, x.dtype))
}

/// Concatenates two `[t, n, c]` tensors along the token axis, giving
/// `[t, n_a + n_b, c]` with `a`'s tokens first in every slice.
pub fn concat_frames(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] {
        return Err(shape_err("concat_frames", &a.shape, &b.shape));
    }
    let (t, c) = (a.shape[0], a.shape[2]);
    let (la, lb) = (a.shape[1] * c, b.shape[1] * c);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..t {
        data.extend_from_slice(&a.data[i * la..(i + 1) * la]);
        data.extend_from_slice(&b.data[i * lb..(i + 1) * lb]);
    }
    Ok(Tensor::raw(
        vec![t, a.shape[1] + b.shape[1], c],
        data,
        a.dtype,
    ))
}

/// Splits a `[t, n, c]` tensor at token `at`, inverting [`concat_frames`].
pub fn split_tokens(x: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    if x.rank() != 3 || at == 0 || at >= x.shape[1] {
        return Err(shape_err("split_tokens", &x.shape, &[at]));
    }
    let (t, n, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut first = Vec::with_capacity(t * at * c);
    let mut second = Vec::with_capacity(t * (n - at) * c);
    for slice in x.data.chunks(n * c) {
        first.extend_from_slice(&slice[..at * c]);
        second.extend_from_slice(&slice[at * c..]);
    }
    Ok((
        Tensor::raw(vec![t, at, c], first, x.dtype),
        Tensor::raw(vec![t, n - at, c], second, x.dtype),
    ))
}

/// Deterministic normal samples with mean zero and standard deviation `std`.
///
/// The stream is ChaCha8 seeded via `seed_from_u64`, mapped through
/// `rand_distr::Normal`. Other implementations will not reproduce these
/// values; exchange fixture files rather than seeds.
pub fn seeded_normal(shape: &[usize], seed: Seed, std: f64) -> Result<Tensor> {
    check_extents(shape)?;
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Config(alloc::format!(
            "standard deviation must be positive, got {std}"
        )));
    }
    let normal = Normal::new(0.0, std).map_err(|_| Error::Config("bad normal".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    let data = (0..numel_of(shape))
        .map(|_| normal.sample(&mut rng))
        .collect();
    Ok(Tensor::raw(shape.to_vec(), data, DType::F64))
}
