//! A byte-level language model built from residual blocks around a
//! sequence-modeling layer.
//!
//! Parameter count for `n` blocks, embedding width `d`, `H` heads of width
//! `hd = d/H`, vocabulary `V`, context `T` and conv width `w`:
//!
//! ```text
//! embedding            V·d  (+ T·d with learned positions)
//! final LN + head      2d   (+ V·d when untied)
//! per block            4d (two LNs) + 8d² (MLP) + d² (output projection)
//!   Transformer        + 3d² (θ_K, θ_Q, θ_V)
//!   Mamba-style        + 2d² (θ_KQ, θ_V) + d² (gate) + 2·d·w (two convs)
//!   TTT layers         + H·d (θ_lr) + 4d (inner LN, LN before O)
//!                      + H·hd² (linear θ_init) or H·8·hd² (MLP θ_init)
//! ```

mod decode;
mod forward;

pub use decode::Decoder;
pub(crate) use forward::check_tokens;
pub use forward::{
    block_forward, causal_conv1d, lm_forward, lm_logits, next_token_loss, next_token_loss_value,
    next_token_targets,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{randn, Real, Tensor};
use crate::ttt::{EtaMode, InitScheme, InnerKind, InnerModel, TttConfig, TttCore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Transformer,
    Mamba,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqLayerKind {
    TttLinear,
    TttMlp,
    SoftmaxAttention,
}

impl SeqLayerKind {
    pub fn inner_kind(self) -> Option<InnerKind> {
        match self {
            SeqLayerKind::TttLinear => Some(InnerKind::Linear),
            SeqLayerKind::TttMlp => Some(InnerKind::Mlp),
            SeqLayerKind::SoftmaxAttention => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub backbone: BackboneKind,
    pub seq_layer: SeqLayerKind,
    pub embed_dim: usize,
    pub heads: usize,
    /// Mamba-style only.
    pub conv_width: usize,
    /// Inner mini-batch size.
    pub mini_batch: usize,
    /// Drop the residual + LN around the inner model.
    pub inner_bare: bool,
    /// Defaults to 1.0 for TTT-Linear and 0.1 for TTT-MLP.
    pub eta_base: Option<f64>,
    /// Replace the learned gate by a constant step size.
    pub fixed_eta: Option<f64>,
    pub theta_init: InitScheme,
    /// Recompute mini-batch activations during backward.
    pub checkpoint: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Transformer,
            seq_layer: SeqLayerKind::TttLinear,
            embed_dim: 64,
            heads: 4,
            conv_width: 4,
            mini_batch: 16,
            inner_bare: false,
            eta_base: None,
            fixed_eta: None,
            theta_init: InitScheme::Default,
            checkpoint: false,
        }
    }
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }

    /// Inner-loop configuration, `None` for attention blocks.
    pub fn ttt(&self) -> Option<TttConfig> {
        let kind = self.seq_layer.inner_kind()?;
        let mut cfg = TttConfig::new(InnerModel::new(kind, self.inner_bare), self.heads, self.head_dim(), self.mini_batch);
        if let Some(e) = self.eta_base {
            cfg.eta_base = e;
        }
        if let Some(e) = self.fixed_eta {
            cfg.eta = EtaMode::Fixed(e);
        }
        cfg.checkpoint = self.checkpoint;
        Some(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.conv_width == 0 {
            return Err(Error::Config("conv_width must be ≥ 1".into()));
        }
        if let Some(e) = self.fixed_eta {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Config(format!("fixed_eta must be positive, got {e}")));
            }
        }
        if let Some(t) = self.ttt() {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_blocks: usize,
    pub block: BlockConfig,
    /// Context length `T`.
    pub seq_len: usize,
    /// Learned absolute positional embedding.
    pub pos_embedding: bool,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            n_blocks: 2,
            block: BlockConfig::default(),
            seq_len: 128,
            pos_embedding: false,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if let Some(t) = self.block.ttt() {
            t.validate_len(self.seq_len)?;
        }
        Ok(())
    }

    /// Closed-form parameter count; see the module docs.
    pub fn param_count(&self) -> usize {
        let b = &self.block;
        let (d, v, h, hd) = (b.embed_dim, self.vocab_size, b.heads, b.head_dim());
        let mut total = v * d + 2 * d;
        if self.pos_embedding {
            total += self.seq_len * d;
        }
        if !self.tie_embeddings {
            total += v * d;
        }
        let mut block = 4 * d + 8 * d * d + d * d;
        block += match b.backbone {
            BackboneKind::Transformer => 3 * d * d,
            BackboneKind::Mamba => 2 * d * d + d * d + 2 * d * b.conv_width,
        };
        block += match b.seq_layer.inner_kind() {
            Some(InnerKind::Linear) => h * d + 4 * d + h * hd * hd,
            Some(InnerKind::Mlp) => h * d + 4 * d + h * 8 * hd * hd,
            None => 0,
        };
        total + self.n_blocks * block
    }
}

/// Parameters of one residual block. Mamba-style blocks keep the shared
/// `θ_KQ` projection in `theta_k` and have no `theta_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<V> {
    pub ln1_g: V,
    pub ln1_b: V,
    pub theta_k: V,
    pub theta_q: Option<V>,
    pub theta_v: V,
    pub conv_k: Option<V>,
    pub conv_q: Option<V>,
    pub gate: Option<V>,
    pub ttt: Option<TttCore<V>>,
    /// LN before the output projection (TTT layers only).
    pub ln_o_g: Option<V>,
    pub ln_o_b: Option<V>,
    pub w_o: V,
    pub ln2_g: V,
    pub ln2_b: V,
    pub mlp_in: V,
    pub mlp_out: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<V> {
    /// `d × V`, one column per byte.
    pub embed: V,
    /// `d × T`.
    pub pos: Option<V>,
    pub blocks: Vec<BlockParams<V>>,
    pub ln_f_g: V,
    pub ln_f_b: V,
    /// `V × d`; absent when tied to the embedding.
    pub head: Option<V>,
}

fn map_opt<V, U>(name: &str, v: &Option<V>, f: &mut impl FnMut(&str, &V) -> U) -> Option<U> {
    v.as_ref().map(|v| f(name, v))
}

impl<V> ModelParams<V> {
    /// Applies `f` to every tensor with its stable name, in a fixed order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &V) -> U) -> ModelParams<U> {
        let f = &mut f;
        let embed = f("embed", &self.embed);
        let pos = map_opt("pos", &self.pos, f);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let n = |s: &str| format!("blocks.{i}.{s}");
                BlockParams {
                    ln1_g: f(&n("ln1.gamma"), &b.ln1_g),
                    ln1_b: f(&n("ln1.beta"), &b.ln1_b),
                    theta_k: f(&n("theta_k"), &b.theta_k),
                    theta_q: map_opt(&n("theta_q"), &b.theta_q, f),
                    theta_v: f(&n("theta_v"), &b.theta_v),
                    conv_k: map_opt(&n("conv_k"), &b.conv_k, f),
                    conv_q: map_opt(&n("conv_q"), &b.conv_q, f),
                    gate: map_opt(&n("gate"), &b.gate, f),
                    ttt: b.ttt.as_ref().map(|c| TttCore {
                        theta_lr: f(&n("ttt.theta_lr"), &c.theta_lr),
                        init: c
                            .init
                            .iter()
                            .enumerate()
                            .map(|(h, w)| crate::ttt::InnerWeights {
                                layers: w
                                    .layers
                                    .iter()
                                    .enumerate()
                                    .map(|(k, l)| f(&n(&format!("ttt.theta_init.h{h}.w{}", k + 1)), l))
                                    .collect(),
                            })
                            .collect(),
                        ln_gamma: f(&n("ttt.ln.gamma"), &c.ln_gamma),
                        ln_beta: f(&n("ttt.ln.beta"), &c.ln_beta),
                    }),
                    ln_o_g: map_opt(&n("ln_o.gamma"), &b.ln_o_g, f),
                    ln_o_b: map_opt(&n("ln_o.beta"), &b.ln_o_b, f),
                    w_o: f(&n("w_o"), &b.w_o),
                    ln2_g: f(&n("ln2.gamma"), &b.ln2_g),
                    ln2_b: f(&n("ln2.beta"), &b.ln2_b),
                    mlp_in: f(&n("mlp_in"), &b.mlp_in),
                    mlp_out: f(&n("mlp_out"), &b.mlp_out),
                }
            })
            .collect();
        ModelParams {
            embed,
            pos,
            blocks,
            ln_f_g: f("ln_f.gamma", &self.ln_f_g),
            ln_f_b: f("ln_f.beta", &self.ln_f_b),
            head: map_opt("head", &self.head, f),
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &V)> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        let mut refs: Vec<&V> = Vec::new();
        self.for_each_ref(&mut |v| refs.push(v));
        names.into_iter().zip(refs).collect()
    }

    fn for_each_ref<'a>(&'a self, f: &mut impl FnMut(&'a V)) {
        f(&self.embed);
        if let Some(p) = &self.pos {
            f(p);
        }
        for b in &self.blocks {
            f(&b.ln1_g);
            f(&b.ln1_b);
            f(&b.theta_k);
            if let Some(v) = &b.theta_q {
                f(v);
            }
            f(&b.theta_v);
            for v in [&b.conv_k, &b.conv_q, &b.gate].into_iter().flatten() {
                f(v);
            }
            if let Some(c) = &b.ttt {
                f(&c.theta_lr);
                for w in &c.init {
                    for l in &w.layers {
                        f(l);
                    }
                }
                f(&c.ln_gamma);
                f(&c.ln_beta);
            }
            for v in [&b.ln_o_g, &b.ln_o_b].into_iter().flatten() {
                f(v);
            }
            f(&b.w_o);
            f(&b.ln2_g);
            f(&b.ln2_b);
            f(&b.mlp_in);
            f(&b.mlp_out);
        }
        f(&self.ln_f_g);
        f(&self.ln_f_b);
        if let Some(h) = &self.head {
            f(h);
        }
    }

    /// Rebuilds the same structure from values given in canonical order.
    pub fn zip_values<U>(&self, values: Vec<U>) -> Result<ModelParams<U>> {
        let mut n = 0;
        self.for_each_ref(&mut |_| n += 1);
        if values.len() != n {
            return Err(Error::Config(format!("expected {n} tensors, got {}", values.len())));
        }
        let mut it = values.into_iter();
        Ok(self.map(|_, _| it.next().expect("length checked")))
    }
}

/// Whether decoupled weight decay applies to the named tensor.
pub fn decays(name: &str) -> bool {
    !(name.contains("gamma")
        || name.contains("beta")
        || name.contains("theta_lr")
        || name.contains("theta_init")
        || name.contains("conv_")
        || name == "pos"
        || name == "embed")
}

impl<T: Real> ModelParams<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let b = &cfg.block;
        let d = b.embed_dim;
        let v = cfg.vocab_size;
        let std = 1.0 / (d as f64).sqrt();
        let ones = || Tensor::full(&[d, 1], T::one());
        let zeros = || Tensor::zeros(&[d, 1]);
        let ttt = b.ttt();
        // TTT views are shrunk by 1/√hd so that ‖θ_K x‖² starts near 1 for
        // layer-normed inputs, keeping the first inner steps contractive.
        let view_std = if ttt.is_some() { std / (b.head_dim() as f64).sqrt() } else { std };
        let blocks = (0..cfg.n_blocks)
            .map(|_| {
                let mamba = b.backbone == BackboneKind::Mamba;
                let conv = || {
                    let mut k = Tensor::zeros(&[d, b.conv_width]);
                    for c in 0..d {
                        k.set(c, b.conv_width - 1, T::one());
                    }
                    k
                };
                BlockParams {
                    ln1_g: ones(),
                    ln1_b: zeros(),
                    theta_k: randn(d, d, view_std, rng),
                    theta_q: (!mamba).then(|| randn(d, d, view_std, rng)),
                    theta_v: randn(d, d, std, rng),
                    conv_k: mamba.then(conv),
                    conv_q: mamba.then(conv),
                    gate: mamba.then(|| randn(d, d, std, rng)),
                    ttt: ttt.map(|c| TttCore::init(&c, d, b.theta_init, rng)),
                    ln_o_g: ttt.map(|_| ones()),
                    ln_o_b: ttt.map(|_| zeros()),
                    w_o: Tensor::zeros(&[d, d]),
                    ln2_g: ones(),
                    ln2_b: zeros(),
                    mlp_in: randn(b.mlp_hidden(), d, std, rng),
                    mlp_out: Tensor::zeros(&[d, b.mlp_hidden()]),
                }
            })
            .collect();
        Ok(Self {
            embed: randn(d, v, 1.0, rng),
            pos: cfg.pos_embedding.then(|| randn(d, cfg.seq_len, 0.1, rng)),
            blocks,
            ln_f_g: ones(),
            ln_f_b: zeros(),
            head: (!cfg.tie_embeddings).then(|| Tensor::zeros(&[v, d])),
        })
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let expected = ModelParams::<Tensor<f64>>::init(cfg, &mut rng)?.map(|_, t| t.shape().to_vec());
        let names = self.named();
        let exp_names = expected.named();
        if names.len() != exp_names.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config implies {}",
                names.len(),
                exp_names.len()
            )));
        }
        for ((name, t), (en, es)) in names.iter().zip(exp_names) {
            if name != &en {
                return Err(Error::Config(format!("unexpected tensor {name}, expected {en}")));
            }
            if t.shape() != es.as_slice() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: es.clone(),
                    found: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }
}
