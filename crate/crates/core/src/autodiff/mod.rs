//! Outer-loop differentiation.
//!
//! Model code is written once against [`Graph`]. [`Eager`] evaluates it
//! directly on tensors; [`Tape`] records the same calls for a single reverse
//! sweep. Inner-loop gradients are never taken by the tape: the TTT layer
//! spells them out with ordinary graph ops, so the tape only ever sees
//! first-order expressions that happen to contain a gradient.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{GradMap, NodeId, Tape};

use crate::tensor::{Real, Tensor};

/// A sub-computation that may be recomputed during the backward pass instead
/// of having its intermediates stored.
pub trait Segment<T: Real>: 'static {
    fn run<G: Graph<T>>(&self, g: &mut G, inputs: &[G::V]) -> Vec<G::V>;
}

/// The op set models are written against. Ops panic on shape mismatch; shapes
/// are validated when configs and parameters are built.
pub trait Graph<T: Real> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    fn constant(&mut self, t: Tensor<T>) -> Self::V;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// `aᵀ·b`
    fn matmul_tn(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// `a·bᵀ`
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn transpose(&mut self, a: &Self::V) -> Self::V;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, s: T) -> Self::V;

    fn causal_mask(&mut self, a: &Self::V) -> Self::V;

    fn slice_rows(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn slice_cols(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Self::V;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Self::V;

    /// Multiplies row `i` by `v[i]` (`v: m×1`).
    fn row_scale(&mut self, a: &Self::V, v: &Self::V) -> Self::V;
    /// Multiplies column `j` by `v[j]` (`v: 1×n`).
    fn col_scale(&mut self, a: &Self::V, v: &Self::V) -> Self::V;
    /// Adds the column vector `v: m×1` to every column.
    fn add_col(&mut self, a: &Self::V, v: &Self::V) -> Self::V;
    /// Stacks `m` copies of the row `v: 1×n`.
    fn bcast_rows(&mut self, v: &Self::V, m: usize) -> Self::V;
    fn mean_rows(&mut self, a: &Self::V) -> Self::V;
    fn sum_all(&mut self, a: &Self::V) -> Self::V;

    fn gelu(&mut self, a: &Self::V) -> Self::V;
    fn gelu_prime(&mut self, a: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    /// `(a + eps)^(-1/2)`
    fn rsqrt_eps(&mut self, a: &Self::V, eps: T) -> Self::V;

    /// Causal column softmax of a square score matrix (rows = keys).
    fn causal_softmax(&mut self, scores: &Self::V) -> Self::V;
    /// Mean cross-entropy of logit columns against their targets; columns
    /// whose target is `None` do not contribute.
    fn cross_entropy(&mut self, logits: &Self::V, targets: &[Option<usize>]) -> Self::V;
    fn gather_cols(&mut self, table: &Self::V, idx: &[usize]) -> Self::V;
    /// Depthwise causal convolution restarting every `seg_len` columns.
    fn causal_conv(&mut self, x: &Self::V, kernels: &Self::V, seg_len: usize) -> Self::V;

    fn checkpoint<S: Segment<T>>(&mut self, seg: S, inputs: &[Self::V]) -> Vec<Self::V>;

    fn rows(&self, a: &Self::V) -> usize {
        self.value(a).rows()
    }

    fn cols(&self, a: &Self::V) -> usize {
        self.value(a).cols()
    }

    /// Per-column standardization: returns the normalized columns and the
    /// `1×n` row of inverse standard deviations.
    fn ln_normalize(&mut self, x: &Self::V, eps: T) -> (Self::V, Self::V) {
        let m = self.rows(x);
        let mu = self.mean_rows(x);
        let mu = self.bcast_rows(&mu, m);
        let centered = self.sub(x, &mu);
        let sq = self.mul(&centered, &centered);
        let var = self.mean_rows(&sq);
        let inv = self.rsqrt_eps(&var, eps);
        let n = self.col_scale(&centered, &inv);
        (n, inv)
    }

    /// Column-wise layer norm with per-row affine `gamma`, `beta` (`m×1`).
    fn layer_norm_cols(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, eps: T) -> Self::V {
        let (n, _) = self.ln_normalize(x, eps);
        let y = self.row_scale(&n, gamma);
        self.add_col(&y, beta)
    }

    /// `dx` of column-wise layer norm given its normalized columns and inverse
    /// standard deviations.
    fn layer_norm_cols_vjp(
        &mut self,
        normalized: &Self::V,
        inv_std: &Self::V,
        gamma: &Self::V,
        upstream: &Self::V,
    ) -> Self::V {
        let m = self.rows(normalized);
        let gn = self.row_scale(upstream, gamma);
        let a = self.mean_rows(&gn);
        let a = self.bcast_rows(&a, m);
        let gnn = self.mul(&gn, normalized);
        let b = self.mean_rows(&gnn);
        let b = self.bcast_rows(&b, m);
        let nb = self.mul(normalized, &b);
        let t = self.sub(&gn, &a);
        let t = self.sub(&t, &nb);
        self.col_scale(&t, inv_std)
    }
}

/// Direct evaluation on tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Real> Graph<T> for Eager {
    type V = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::matmul(a, b)
    }

    fn matmul_tn(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::matmul_tn(a, b)
    }

    fn matmul_nt(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::matmul_nt(a, b)
    }

    fn transpose(&mut self, a: &Tensor<T>) -> Tensor<T> {
        a.transpose()
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::add(a, b)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::mul(a, b)
    }

    fn scale(&mut self, a: &Tensor<T>, s: T) -> Tensor<T> {
        a.scale(s)
    }

    fn causal_mask(&mut self, a: &Tensor<T>) -> Tensor<T> {
        crate::tensor::causal_mask(a).unwrap_or_else(|e| panic!("{e}"))
    }

    fn slice_rows(&mut self, a: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
        a.slice_rows(start, len)
    }

    fn slice_cols(&mut self, a: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
        a.slice_cols(start, len)
    }

    fn concat_rows(&mut self, parts: &[Tensor<T>]) -> Tensor<T> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat_rows(&refs).unwrap_or_else(|e| panic!("{e}"))
    }

    fn concat_cols(&mut self, parts: &[Tensor<T>]) -> Tensor<T> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat_cols(&refs).unwrap_or_else(|e| panic!("{e}"))
    }

    fn row_scale(&mut self, a: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
        kernels::row_scale(a, v)
    }

    fn col_scale(&mut self, a: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
        kernels::col_scale(a, v)
    }

    fn add_col(&mut self, a: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
        kernels::add_col(a, v)
    }

    fn bcast_rows(&mut self, v: &Tensor<T>, m: usize) -> Tensor<T> {
        kernels::bcast_rows(v, m)
    }

    fn mean_rows(&mut self, a: &Tensor<T>) -> Tensor<T> {
        kernels::mean_rows(a)
    }

    fn sum_all(&mut self, a: &Tensor<T>) -> Tensor<T> {
        Tensor::scalar(a.sum())
    }

    fn gelu(&mut self, a: &Tensor<T>) -> Tensor<T> {
        kernels::gelu_map(a)
    }

    fn gelu_prime(&mut self, a: &Tensor<T>) -> Tensor<T> {
        kernels::gelu_prime_map(a)
    }

    fn sigmoid(&mut self, a: &Tensor<T>) -> Tensor<T> {
        kernels::sigmoid_map(a)
    }

    fn rsqrt_eps(&mut self, a: &Tensor<T>, eps: T) -> Tensor<T> {
        kernels::rsqrt_eps(a, eps)
    }

    fn causal_softmax(&mut self, scores: &Tensor<T>) -> Tensor<T> {
        kernels::causal_softmax(scores)
    }

    fn cross_entropy(&mut self, logits: &Tensor<T>, targets: &[Option<usize>]) -> Tensor<T> {
        Tensor::scalar(kernels::cross_entropy(logits, targets))
    }

    fn gather_cols(&mut self, table: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
        kernels::gather_cols(table, idx)
    }

    fn causal_conv(&mut self, x: &Tensor<T>, kernels_: &Tensor<T>, seg_len: usize) -> Tensor<T> {
        kernels::causal_conv(x, kernels_, seg_len)
    }

    fn checkpoint<S: Segment<T>>(&mut self, seg: S, inputs: &[Tensor<T>]) -> Vec<Tensor<T>> {
        seg.run(self, inputs)
    }
}
