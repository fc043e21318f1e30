//! Reference attention layers the TTT layer is checked against.

use crate::autodiff::Eager;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::ttt::{ttt_views, EtaMode, Form, InitScheme, InnerModel, TttConfig, TttCore, Views};

/// View projections, each `hd × d`.
#[derive(Debug, Clone)]
pub struct AttnParams<T: Real = f64> {
    pub theta_k: Tensor<T>,
    pub theta_q: Tensor<T>,
    pub theta_v: Tensor<T>,
}

impl<T: Real> AttnParams<T> {
    pub fn new(theta_k: Tensor<T>, theta_q: Tensor<T>, theta_v: Tensor<T>) -> Result<Self> {
        let s = theta_k.shape().to_vec();
        if theta_k.rank() != 2 || theta_q.shape() != s.as_slice() || theta_v.shape() != s.as_slice() {
            return Err(Error::shape("attn_params", theta_q.shape(), &s));
        }
        Ok(Self { theta_k, theta_q, theta_v })
    }

    pub fn head_dim(&self) -> usize {
        self.theta_k.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.theta_k.cols()
    }

    /// `(K, Q, V)` views of `x` (`d × T`).
    fn views(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if x.rank() != 2 || x.rows() != self.embed_dim() {
            return Err(Error::shape("attention input", x.shape(), &[self.embed_dim(), x.cols()]));
        }
        Ok((
            self.theta_k.matmul(x)?,
            self.theta_q.matmul(x)?,
            self.theta_v.matmul(x)?,
        ))
    }
}

/// `z_t = Σ_{s≤t} v_s k_sᵀ q_t`, evaluated with the running state `Σ v_s k_sᵀ`.
pub fn linear_attention<T: Real>(x: &Tensor<T>, p: &AttnParams<T>) -> Result<Tensor<T>> {
    let (k, q, v) = p.views(x)?;
    let hd = p.head_dim();
    let mut state = Tensor::<T>::zeros(&[hd, hd]);
    let mut z = Tensor::zeros(&[hd, x.cols()]);
    for t in 0..x.cols() {
        let kt = k.column(t);
        let vt = v.column(t);
        state.add_assign(&vt.matmul_nt(&kt)?);
        let zt = state.matmul(&q.column(t))?;
        for i in 0..hd {
            z.set(i, t, zt.at(i, 0));
        }
    }
    Ok(z)
}

/// Causal softmax attention without the `1/√d` temperature.
pub fn softmax_attention<T: Real>(x: &Tensor<T>, p: &AttnParams<T>) -> Result<Tensor<T>> {
    let (k, q, v) = p.views(x)?;
    let hd = p.head_dim();
    let n = x.cols();
    let mut z = Tensor::zeros(&[hd, n]);
    for t in 0..n {
        let qt = q.column(t);
        let scores: Vec<T> = (0..=t)
            .map(|s| k.column(s).dot(&qt))
            .collect::<Result<_>>()?;
        let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let w: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
        let total = w.iter().copied().fold(T::zero(), |a, b| a + b);
        for i in 0..hd {
            let acc = (0..=t).fold(T::zero(), |a, s| a + w[s] * v.at(i, s));
            z.set(i, t, acc / total);
        }
    }
    Ok(z)
}

/// Kernel regression over the `(k_s, v_s)` pairs seen so far.
pub struct NadarayaWatson<T: Real> {
    keys: Vec<Tensor<T>>,
    labels: Vec<Tensor<T>>,
    /// Constant factor on the unnormalized kernel.
    scale: T,
}

impl<T: Real> NadarayaWatson<T> {
    pub fn new(scale: T) -> Self {
        Self {
            keys: Vec::new(),
            labels: Vec::new(),
            scale,
        }
    }

    pub fn observe(&mut self, key: Tensor<T>, label: Tensor<T>) {
        self.keys.push(key);
        self.labels.push(label);
    }

    /// Normalized kernel weights for query `q`, with `κ(x_s, q) ∝ exp(k_sᵀ q)`.
    pub fn weights(&self, q: &Tensor<T>) -> Result<Vec<T>> {
        let logits: Vec<T> = self.keys.iter().map(|k| k.dot(q)).collect::<Result<_>>()?;
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let kappa: Vec<T> = logits.iter().map(|&l| self.scale * (l - m).exp()).collect();
        let total = kappa.iter().copied().fold(T::zero(), |a, b| a + b);
        Ok(kappa.into_iter().map(|k| k / total).collect())
    }

    pub fn predict(&self, q: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.weights(q)?;
        let mut out = Tensor::zeros(self.labels[0].shape());
        for (wi, y) in w.iter().zip(&self.labels) {
            out.axpy(*wi, y);
        }
        Ok(out)
    }
}

/// TTT layer whose learner is the Nadaraya-Watson estimator: each token adds
/// its `(θ_K x, θ_V x)` pair and the output is the estimate at `θ_Q x`.
pub fn nadaraya_watson<T: Real>(x: &Tensor<T>, p: &AttnParams<T>) -> Result<Tensor<T>> {
    nadaraya_watson_scaled(x, p, T::one())
}

pub fn nadaraya_watson_scaled<T: Real>(x: &Tensor<T>, p: &AttnParams<T>, scale: T) -> Result<Tensor<T>> {
    let (k, q, v) = p.views(x)?;
    let mut est = NadarayaWatson::new(scale);
    let mut cols = Vec::with_capacity(x.cols());
    for t in 0..x.cols() {
        est.observe(k.column(t), v.column(t));
        cols.push(est.predict(&q.column(t))?);
    }
    let refs: Vec<&Tensor<T>> = cols.iter().collect();
    Tensor::concat_cols(&refs)
}

/// TTT-Linear in bare mode with `W₀ = 0` and fixed `η = 1/2`, mini-batch `b`,
/// on the views of `p`.
pub fn ttt_linear_bare(x: &Tensor<f64>, p: &AttnParams<f64>, b: usize) -> Result<Tensor<f64>> {
    ttt_linear_bare_with(x, p, b, InnerModel::linear().bare())
}

/// [`ttt_linear_bare`] with an explicit inner model, so a deliberately
/// broken learner can be checked against the oracle.
pub fn ttt_linear_bare_with(x: &Tensor<f64>, p: &AttnParams<f64>, b: usize, model: InnerModel) -> Result<Tensor<f64>> {
    let (k, q, v) = p.views(x)?;
    let mut cfg = TttConfig::new(model, 1, p.head_dim(), b);
    cfg.eta = EtaMode::Fixed(0.5);
    cfg.validate_len(x.cols())?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let core = TttCore::init(&cfg, p.embed_dim(), InitScheme::Zeros, &mut rng);
    let views = Views { train: k, label: v, test: q };
    let eta = Tensor::full(&[1, x.cols()], 0.5);
    Ok(ttt_views(&mut Eager, &cfg, &core, &views, &eta, x.cols(), Form::Dual).z)
}

/// `max |Z_ttt − Z_linattn|` for the batch-GD configuration (`b = T`).
pub fn linear_attention_gap(x: &Tensor<f64>, p: &AttnParams<f64>) -> Result<f64> {
    linear_attention_gap_with_b(x, p, x.cols())
}

pub fn linear_attention_gap_with_b(x: &Tensor<f64>, p: &AttnParams<f64>, b: usize) -> Result<f64> {
    let ttt = ttt_linear_bare(x, p, b)?;
    Ok(ttt.max_abs_diff(&linear_attention(x, p)?))
}
