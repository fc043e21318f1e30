//! Test-time-training layers.
//!
//! The hidden state of a TTT layer is the weight set `W` of a small inner
//! model `f`. Every token takes a gradient step on the reconstruction loss
//! `‖f(θ_K x; W) − θ_V x‖²` and the output is `f(θ_Q x; W_t)`. Within a
//! mini-batch of `b` tokens every gradient is taken at the weights of the
//! previous boundary, which is what lets the dual form evaluate a whole
//! mini-batch with matmuls.

mod forward;
mod inner;
mod layer;

pub use forward::{dual_head, primal_head, DualChunk};
pub use inner::{
    apply_inner, eta_gate, inner_backward, inner_grad, inner_loss, inner_model_apply,
    InnerBackward,
};
pub use layer::{
    gate_eta, multihead_forward, project_views, ttt_forward_dual, ttt_forward_primal, ttt_layer,
    ttt_views, Form, TttState, Views, ViewsOutput,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{randn, Real, Tensor, LN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerKind {
    Linear,
    /// Two layers, hidden width 4× the head dimension, GELU between.
    Mlp,
}

impl InnerKind {
    pub fn layers(self) -> usize {
        match self {
            InnerKind::Linear => 1,
            InnerKind::Mlp => 2,
        }
    }

    /// Shapes of the inner weight matrices for head dimension `hd`.
    pub fn weight_shapes(self, hd: usize) -> Vec<[usize; 2]> {
        match self {
            InnerKind::Linear => vec![[hd, hd]],
            InnerKind::Mlp => vec![[4 * hd, hd], [hd, 4 * hd]],
        }
    }
}

/// The inner model `f`: its kind and whether the residual + LN wrapper
/// `f(x) = x + LN(f_res(x))` is disabled (`bare`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerModel {
    pub kind: InnerKind,
    pub bare: bool,
    pub ln_eps: f64,
    grad_sign: f64,
}

impl InnerModel {
    pub fn new(kind: InnerKind, bare: bool) -> Self {
        Self {
            kind,
            bare,
            ln_eps: LN_EPS,
            grad_sign: 1.0,
        }
    }

    pub fn linear() -> Self {
        Self::new(InnerKind::Linear, false)
    }

    pub fn mlp() -> Self {
        Self::new(InnerKind::Mlp, false)
    }

    pub fn bare(mut self) -> Self {
        self.bare = true;
        self
    }

    /// Negates every inner gradient. Mutation probe for the verification
    /// suite; never useful otherwise.
    #[doc(hidden)]
    pub fn with_flipped_gradient_sign(mut self) -> Self {
        self.grad_sign = -self.grad_sign;
        self
    }

    pub(crate) fn grad_sign(&self) -> f64 {
        self.grad_sign
    }
}

/// How the per-token inner learning rate is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// `η(x) = η_base · σ(θ_lr · x)`.
    Gate,
    /// The same step size for every token.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TttConfig {
    pub model: InnerModel,
    pub heads: usize,
    pub head_dim: usize,
    /// Inner mini-batch size `b`.
    pub mini_batch: usize,
    pub eta_base: f64,
    pub eta: EtaMode,
    /// Recompute intra-mini-batch activations during backward instead of
    /// storing them; only boundary weights are kept.
    pub checkpoint: bool,
}

impl TttConfig {
    pub fn new(model: InnerModel, heads: usize, head_dim: usize, mini_batch: usize) -> Self {
        let eta_base = match model.kind {
            InnerKind::Linear => 1.0,
            InnerKind::Mlp => 0.1,
        };
        Self {
            model,
            heads,
            head_dim,
            mini_batch,
            eta_base,
            eta: EtaMode::Gate,
            checkpoint: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("heads and head_dim must be positive".into()));
        }
        if self.mini_batch == 0 {
            return Err(Error::Config("inner mini-batch size must be ≥ 1".into()));
        }
        if !(self.eta_base > 0.0 && self.eta_base.is_finite()) {
            return Err(Error::Config(format!(
                "eta_base must be positive, got {}",
                self.eta_base
            )));
        }
        if !self.model.bare && self.head_dim < 2 {
            return Err(Error::Config(
                "inner layer norm needs head_dim ≥ 2".into(),
            ));
        }
        Ok(())
    }

    pub fn validate_len(&self, seq_len: usize) -> Result<()> {
        self.validate()?;
        if seq_len == 0 || seq_len % self.mini_batch != 0 {
            return Err(Error::Config(format!(
                "sequence length {seq_len} is not a positive multiple of mini-batch size {}",
                self.mini_batch
            )));
        }
        Ok(())
    }
}

/// Inner weights of one head: `[W]` for linear, `[W¹, W²]` for MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerWeights<V> {
    pub layers: Vec<V>,
}

impl<T: Real> InnerWeights<Tensor<T>> {
    pub fn zeros(kind: InnerKind, hd: usize) -> Self {
        Self {
            layers: kind
                .weight_shapes(hd)
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.layers
            .iter()
            .zip(&other.layers)
            .fold(T::zero(), |m, (a, b)| m.max(a.max_abs_diff(b)))
    }

    pub fn rel_diff(&self, reference: &Self) -> T {
        self.layers
            .iter()
            .zip(&reference.layers)
            .fold(T::zero(), |m, (a, b)| m.max(a.rel_diff(b)))
    }
}

/// Outer-loop parameters of the TTT machinery that do not depend on how the
/// views are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TttCore<V> {
    /// `H × d_in` gate weights, one row per head.
    pub theta_lr: V,
    /// `θ_init = W₀`, per head.
    pub init: Vec<InnerWeights<V>>,
    /// Inner LN scale and shift, `H·hd × 1` (head `h` owns rows `h·hd..`).
    pub ln_gamma: V,
    pub ln_beta: V,
}

/// Full parameter set of a stand-alone TTT layer. The view projections stack
/// the heads: rows `h·hd..(h+1)·hd` of `theta_k` are head `h`'s `θ_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TttLayerParams<V> {
    pub theta_k: V,
    pub theta_q: V,
    pub theta_v: V,
    pub core: TttCore<V>,
}

/// How `θ_init` is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Zeros for a bare linear model, `U(±1/√fan_in)` otherwise. With the
    /// inner LN a zero `W` sits at the LN singularity, where the first inner
    /// gradient is scaled by `1/√ε` and swamps every later step.
    Default,
    Zeros,
    Uniform,
}

impl<T: Real> TttCore<Tensor<T>> {
    pub fn init(cfg: &TttConfig, d_in: usize, scheme: InitScheme, rng: &mut impl Rng) -> Self {
        let hd = cfg.head_dim;
        let init = (0..cfg.heads)
            .map(|_| {
                let uniform = match scheme {
                    InitScheme::Default => !(cfg.model.kind == InnerKind::Linear && cfg.model.bare),
                    InitScheme::Zeros => false,
                    InitScheme::Uniform => true,
                };
                InnerWeights {
                    layers: cfg
                        .model
                        .kind
                        .weight_shapes(hd)
                        .iter()
                        .map(|&[r, c]| {
                            if uniform {
                                let a = 1.0 / (c as f64).sqrt();
                                Tensor::from_fn(r, c, |_, _| T::c(rng.random_range(-a..a)))
                            } else {
                                Tensor::zeros(&[r, c])
                            }
                        })
                        .collect(),
                }
            })
            .collect();
        Self {
            theta_lr: Tensor::zeros(&[cfg.heads, d_in]),
            init,
            ln_gamma: Tensor::full(&[cfg.embed_dim(), 1], T::one()),
            ln_beta: Tensor::zeros(&[cfg.embed_dim(), 1]),
        }
    }

    pub fn validate(&self, cfg: &TttConfig, d_in: usize) -> Result<()> {
        check_shape("theta_lr", &self.theta_lr, &[cfg.heads, d_in])?;
        check_shape("ln_gamma", &self.ln_gamma, &[cfg.embed_dim(), 1])?;
        check_shape("ln_beta", &self.ln_beta, &[cfg.embed_dim(), 1])?;
        if self.init.len() != cfg.heads {
            return Err(Error::Config(format!(
                "θ_init has {} heads, config has {}",
                self.init.len(),
                cfg.heads
            )));
        }
        for (h, w) in self.init.iter().enumerate() {
            let shapes = cfg.model.kind.weight_shapes(cfg.head_dim);
            if w.layers.len() != shapes.len() {
                return Err(Error::Config(format!(
                    "θ_init head {h} has {} layers, expected {}",
                    w.layers.len(),
                    shapes.len()
                )));
            }
            for (k, (t, s)) in w.layers.iter().zip(&shapes).enumerate() {
                check_shape(&format!("theta_init.h{h}.w{}", k + 1), t, s)?;
            }
        }
        Ok(())
    }
}

impl<T: Real> TttLayerParams<Tensor<T>> {
    /// Random views with `N(0, 1/d)` entries; `θ_init` per `scheme`; gate at
    /// zero; LN at identity.
    pub fn init(cfg: &TttConfig, scheme: InitScheme, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim();
        let std = 1.0 / (d as f64).sqrt();
        let theta_k = randn(d, d, std, rng);
        let theta_q = randn(d, d, std, rng);
        let theta_v = randn(d, d, std, rng);
        Self {
            theta_k,
            theta_q,
            theta_v,
            core: TttCore::init(cfg, d, scheme, rng),
        }
    }

    pub fn validate(&self, cfg: &TttConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.embed_dim();
        check_shape("theta_k", &self.theta_k, &[d, d])?;
        check_shape("theta_q", &self.theta_q, &[d, d])?;
        check_shape("theta_v", &self.theta_v, &[d, d])?;
        self.core.validate(cfg, d)
    }

    pub fn cast<U: Real>(&self) -> TttLayerParams<Tensor<U>> {
        TttLayerParams {
            theta_k: self.theta_k.cast(),
            theta_q: self.theta_q.cast(),
            theta_v: self.theta_v.cast(),
            core: TttCore {
                theta_lr: self.core.theta_lr.cast(),
                init: self
                    .core
                    .init
                    .iter()
                    .map(|w| InnerWeights { layers: w.layers.iter().map(Tensor::cast).collect() })
                    .collect(),
                ln_gamma: self.core.ln_gamma.cast(),
                ln_beta: self.core.ln_beta.cast(),
            },
        }
    }
}

pub(crate) fn check_shape<T: Real>(name: &str, t: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}
