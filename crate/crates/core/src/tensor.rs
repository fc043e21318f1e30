//! Dense row-major arrays and the fixed kernel set the layers are built from.
//!
//! Matrices follow the column-as-token convention: a sequence of `T` vectors
//! of width `d` is a `d × T` tensor whose column `t` is token `t`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

/// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Floating-point element type. Implemented for `f64` (default) and `f32`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Send + Sync + Debug + Display + Sum + 'static
{
    /// Short dtype tag used in file headers and reports.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn erf(self) -> Self;

    /// `C = alpha·op(A)·op(B) + beta·C` over raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` regions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
}

/// Dense row-major array of rank ≤ 3.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::InvalidTensor(format!(
                "rank {} exceeds 3",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn checked(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("tensor of shape {shape:?}")));
        }
        Ok(t)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(shape.len() <= 3, "rank {} exceeds 3", shape.len());
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Builds a matrix from nested rows; test and example convenience.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::from_fn(r, c, |i, j| T::c(rows[i][j]))
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` viewing rank-1 tensors as column vectors.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [d] => (*d, 1),
            [r, c] => (*r, *c),
            [a, r, c] => (a * r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s·other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.numel() != other.numel() {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Max-norm relative difference `max|a−b| / max|b|`.
    pub fn rel_diff(&self, reference: &Self) -> T {
        let scale = reference.max_abs();
        let diff = self.max_abs_diff(reference);
        if scale == T::zero() {
            diff
        } else {
            diff / scale
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        gemm(self, false, other, false, "matmul")
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        gemm(self, true, other, false, "matmul_tn")
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        gemm(self, false, other, true, "matmul_nt")
    }

    pub fn column(&self, j: usize) -> Self {
        let (r, c) = self.dims2();
        assert!(j < c, "column {j} out of range for {c} columns");
        Self {
            shape: vec![r, 1],
            data: (0..r).map(|i| self.data[i * c + j]).collect(),
        }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let (r, c) = self.dims2();
        assert!(start + len <= c, "column slice {start}+{len} exceeds {c}");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Self {
            shape: vec![r, len],
            data,
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let (r, c) = self.dims2();
        assert!(start + len <= r, "row slice {start}+{len} exceeds {r}");
        Self {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        }
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let r = parts.first().map_or(0, |p| p.rows());
        if let Some(bad) = parts.iter().find(|p| p.rows() != r) {
            return Err(Error::shape("concat_cols", &parts[0].shape, &bad.shape));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Ok(Self {
            shape: vec![r, total],
            data,
        })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        if let Some(bad) = parts.iter().find(|p| p.cols() != c) {
            return Err(Error::shape("concat_rows", &parts[0].shape, &bad.shape));
        }
        let total: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(total * c);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![total, c],
            data,
        })
    }
}

fn gemm<T: Real>(
    a: &Tensor<T>,
    a_t: bool,
    b: &Tensor<T>,
    b_t: bool,
    op: &'static str,
) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (m, k, rsa, csa) = if a_t {
        (ac, ar, 1isize, ac as isize)
    } else {
        (ar, ac, ac as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if b_t {
        (bc, br, 1isize, bc as isize)
    } else {
        (br, bc, bc as isize, 1isize)
    };
    if k != k2 {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides above describe the row-major buffers exactly.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `rows × cols` matrix of `N(0, std²)` samples.
pub fn randn<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::c(std * z)
    })
}

/// `C = A·B` for `A: m×k`, `B: k×n`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(b)
}

/// Zeroes entries with row index `s` greater than column index `t`, keeping
/// exactly the summands `s ≤ t` of a causal prefix sum over sources `s`.
pub fn causal_mask<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = m.dims2();
    if r != c || m.rank() != 2 {
        return Err(Error::shape("causal_mask", m.shape(), &[c, r]));
    }
    Ok(causal_mask_unchecked(m))
}

pub(crate) fn causal_mask_unchecked<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = m.dims2();
    let mut out = m.clone();
    for s in 0..r {
        for t in 0..s.min(c) {
            out.data[s * c + t] = T::zero();
        }
    }
    out
}

struct LnStats<T> {
    normalized: Vec<T>,
    inv_std: T,
}

fn ln_check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<()> {
    if x.rank() != 1 {
        return Err(Error::shape("layer_norm", x.shape(), &[x.numel()]));
    }
    if gamma.shape() != x.shape() {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.shape() != x.shape() {
        return Err(Error::shape("layer_norm", x.shape(), beta.shape()));
    }
    if x.numel() < 2 {
        return Err(Error::Degenerate(format!(
            "layer norm over {} element(s)",
            x.numel()
        )));
    }
    if eps < T::zero() || !eps.is_finite() {
        return Err(Error::Degenerate(format!("layer norm eps {eps}")));
    }
    Ok(())
}

fn ln_stats<T: Real>(x: &[T], eps: T) -> Result<LnStats<T>> {
    let d = T::c(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    if var + eps <= T::zero() {
        return Err(Error::Degenerate(
            "zero variance with eps = 0 in layer norm".into(),
        ));
    }
    let inv_std = (var + eps).sqrt().recip();
    Ok(LnStats {
        normalized: x.iter().map(|&v| (v - mean) * inv_std).collect(),
        inv_std,
    })
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` with 1/d variance.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    ln_check(x, gamma, beta, eps)?;
    let st = ln_stats(x.data(), eps)?;
    let y = st
        .normalized
        .iter()
        .zip(gamma.data())
        .zip(beta.data())
        .map(|((&n, &g), &b)| g * n + b)
        .collect();
    Ok(Tensor::vector(y))
}

/// Vector-Jacobian products of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_vjp<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    ln_check(x, gamma, beta, eps)?;
    if upstream.shape() != x.shape() {
        return Err(Error::shape("layer_norm_vjp", x.shape(), upstream.shape()));
    }
    let st = ln_stats(x.data(), eps)?;
    let d = T::c(x.numel() as f64);
    let gn: Vec<T> = upstream
        .data()
        .iter()
        .zip(gamma.data())
        .map(|(&u, &g)| u * g)
        .collect();
    let mean_gn = gn.iter().copied().sum::<T>() / d;
    let mean_gn_n = gn
        .iter()
        .zip(&st.normalized)
        .map(|(&g, &n)| g * n)
        .sum::<T>()
        / d;
    let dx = gn
        .iter()
        .zip(&st.normalized)
        .map(|(&g, &n)| st.inv_std * (g - mean_gn - n * mean_gn_n))
        .collect();
    let dgamma = upstream
        .data()
        .iter()
        .zip(&st.normalized)
        .map(|(&u, &n)| u * n)
        .collect();
    Ok((
        Tensor::vector(dx),
        Tensor::vector(dgamma),
        upstream.clone(),
    ))
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_prime<T: Real>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::c(INV_SQRT_2PI) * (-(x * x) * T::c(0.5)).exp();
    cdf + x * pdf
}

#[inline]
pub fn gelu_second<T: Real>(x: T) -> T {
    let pdf = T::c(INV_SQRT_2PI) * (-(x * x) * T::c(0.5)).exp();
    pdf * (T::c(2.0) - x * x)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Normalizes every column to a probability vector (max-subtracted).
pub fn softmax_cols<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = m.dims2();
    let mut out = m.clone();
    for j in 0..c {
        let mut mx = T::neg_infinity();
        for i in 0..r {
            mx = mx.max(m.data[i * c + j]);
        }
        let mut total = T::zero();
        for i in 0..r {
            let e = (m.data[i * c + j] - mx).exp();
            out.data[i * c + j] = e;
            total += e;
        }
        for i in 0..r {
            out.data[i * c + j] /= total;
        }
    }
    out
}
