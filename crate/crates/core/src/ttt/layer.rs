use serde::{Deserialize, Serialize};

use super::forward::{dual_head, primal_head};
use super::inner::{apply_inner, inner_backward};
use super::{EtaMode, InnerWeights, TttConfig, TttCore, TttLayerParams};
use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Primal,
    #[default]
    Dual,
}

/// Training, label and test views, each `(H·hd) × N` with heads stacked
/// along rows.
#[derive(Debug, Clone)]
pub struct Views<V> {
    pub train: V,
    pub label: V,
    pub test: V,
}

/// Per-head, per-token step sizes `H × N` for layer input `x` (`d_in × N`).
pub fn gate_eta<T: Real, G: Graph<T>>(g: &mut G, cfg: &TttConfig, theta_lr: &G::V, x: &G::V) -> G::V {
    match cfg.eta {
        EtaMode::Gate => {
            let s = g.matmul(theta_lr, x);
            let s = g.sigmoid(&s);
            g.scale(&s, T::c(cfg.eta_base))
        }
        EtaMode::Fixed(v) => {
            let n = g.cols(x);
            g.constant(Tensor::full(&[cfg.heads, n], T::c(v)))
        }
    }
}

/// Output of [`ttt_views`]: `z` is `(H·hd) × N`; `finals[s][h]` holds the
/// inner weights of head `h` after the last token of sequence `s`.
pub struct ViewsOutput<V> {
    pub z: V,
    pub finals: Vec<Vec<InnerWeights<V>>>,
}

/// Runs the inner loop on precomputed views. The `N` columns hold `N / seq_len`
/// independent sequences back to back; each starts from `θ_init`.
pub fn ttt_views<T: Real, G: Graph<T>>(
    g: &mut G,
    cfg: &TttConfig,
    core: &TttCore<G::V>,
    views: &Views<G::V>,
    eta: &G::V,
    seq_len: usize,
    form: Form,
) -> ViewsOutput<G::V> {
    let n = g.cols(&views.train);
    assert!(seq_len > 0 && n % seq_len == 0, "{n} columns are not whole sequences of {seq_len}");
    let hd = cfg.head_dim;
    let heads = cfg.heads;
    let n_seq = n / seq_len;

    let gammas: Vec<G::V> = (0..heads).map(|h| g.slice_rows(&core.ln_gamma, h * hd, hd)).collect();
    let betas: Vec<G::V> = (0..heads).map(|h| g.slice_rows(&core.ln_beta, h * hd, hd)).collect();

    let mut seq_outs = Vec::with_capacity(n_seq);
    let mut finals = Vec::with_capacity(n_seq);
    for s in 0..n_seq {
        let cut = |g: &mut G, v: &G::V| {
            if n_seq == 1 {
                v.clone()
            } else {
                g.slice_cols(v, s * seq_len, seq_len)
            }
        };
        let train = cut(g, &views.train);
        let label = cut(g, &views.label);
        let test = cut(g, &views.test);
        let eta_s = cut(g, eta);

        let mut head_outs = Vec::with_capacity(heads);
        let mut head_w = Vec::with_capacity(heads);
        for h in 0..heads {
            let rows = |g: &mut G, v: &G::V| {
                if heads == 1 {
                    v.clone()
                } else {
                    g.slice_rows(v, h * hd, hd)
                }
            };
            let tr = rows(g, &train);
            let lb = rows(g, &label);
            let te = rows(g, &test);
            let e = if heads == 1 { eta_s.clone() } else { g.slice_rows(&eta_s, h, 1) };
            let run = match form {
                Form::Primal => primal_head::<T, G>,
                Form::Dual => dual_head::<T, G>,
            };
            let (z, w) = run(g, cfg, &core.init[h], &tr, &lb, &te, &e, &gammas[h], &betas[h]);
            head_outs.push(z);
            head_w.push(w);
        }
        seq_outs.push(if heads == 1 {
            head_outs.pop().expect("one head")
        } else {
            g.concat_rows(&head_outs)
        });
        finals.push(head_w);
    }
    let z = if n_seq == 1 {
        seq_outs.pop().expect("one sequence")
    } else {
        g.concat_cols(&seq_outs)
    };
    ViewsOutput { z, finals }
}

/// Projects `x` (`d × N`) into the three views.
pub fn project_views<T: Real, G: Graph<T>>(g: &mut G, p: &TttLayerParams<G::V>, x: &G::V) -> Views<G::V> {
    Views {
        train: g.matmul(&p.theta_k, x),
        label: g.matmul(&p.theta_v, x),
        test: g.matmul(&p.theta_q, x),
    }
}

/// Full stand-alone layer on any graph: views, gate and inner loop.
pub fn ttt_layer<T: Real, G: Graph<T>>(
    g: &mut G,
    cfg: &TttConfig,
    p: &TttLayerParams<G::V>,
    x: &G::V,
    seq_len: usize,
    form: Form,
) -> ViewsOutput<G::V> {
    let views = project_views(g, p, x);
    let eta = gate_eta(g, cfg, &p.core.theta_lr, x);
    ttt_views(g, cfg, &p.core, &views, &eta, seq_len, form)
}

fn run_checked<T: Real>(
    cfg: &TttConfig,
    params: &TttLayerParams<Tensor<T>>,
    x: &Tensor<T>,
    form: Form,
) -> Result<(Tensor<T>, Vec<InnerWeights<Tensor<T>>>)> {
    params.validate(cfg)?;
    let d = cfg.embed_dim();
    if x.rank() != 2 || x.rows() != d {
        return Err(Error::shape("ttt_forward", x.shape(), &[d, x.cols()]));
    }
    cfg.validate_len(x.cols())?;
    let mut out = ttt_layer(&mut Eager, cfg, params, x, x.cols(), form);
    Ok((out.z, out.finals.pop().expect("one sequence")))
}

/// Primal form over one sequence `x` (`d × T`): outputs `d × T` and the final
/// inner weights per head.
pub fn ttt_forward_primal<T: Real>(
    cfg: &TttConfig,
    params: &TttLayerParams<Tensor<T>>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<InnerWeights<Tensor<T>>>)> {
    run_checked(cfg, params, x, Form::Primal)
}

/// Dual form over one sequence; same contract as [`ttt_forward_primal`].
pub fn ttt_forward_dual<T: Real>(
    cfg: &TttConfig,
    params: &TttLayerParams<Tensor<T>>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<InnerWeights<Tensor<T>>>)> {
    run_checked(cfg, params, x, Form::Dual)
}

pub fn multihead_forward<T: Real>(
    cfg: &TttConfig,
    params: &TttLayerParams<Tensor<T>>,
    x: &Tensor<T>,
    form: Form,
) -> Result<Tensor<T>> {
    Ok(run_checked(cfg, params, x, form)?.0)
}

/// Hidden state for token-by-token decoding.
#[derive(Debug, Clone)]
pub struct TttState<T: Real = f64> {
    w: Vec<InnerWeights<Tensor<T>>>,
    anchor: Vec<InnerWeights<Tensor<T>>>,
    pos: usize,
}

impl<T: Real> TttState<T> {
    pub fn new(core: &TttCore<Tensor<T>>) -> Self {
        Self {
            w: core.init.clone(),
            anchor: core.init.clone(),
            pos: 0,
        }
    }

    pub fn weights(&self) -> &[InnerWeights<Tensor<T>>] {
        &self.w
    }

    pub fn anchor(&self) -> &[InnerWeights<Tensor<T>>] {
        &self.anchor
    }

    /// Tokens consumed in the current mini-batch.
    pub fn pos(&self) -> usize {
        self.pos
    }

    /// One token from precomputed view columns (`H·hd × 1` each) and step
    /// sizes (`H × 1`). Returns `z_t` (`H·hd × 1`).
    pub fn step_views(
        &mut self,
        cfg: &TttConfig,
        core: &TttCore<Tensor<T>>,
        views: &Views<Tensor<T>>,
        eta: &Tensor<T>,
    ) -> Tensor<T> {
        let hd = cfg.head_dim;
        let g = &mut Eager;
        let mut outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let gamma = core.ln_gamma.slice_rows(h * hd, hd);
            let beta = core.ln_beta.slice_rows(h * hd, hd);
            let xh = views.train.slice_rows(h * hd, hd);
            let y = views.label.slice_rows(h * hd, hd);
            let xb = views.test.slice_rows(h * hd, hd);
            let e = eta.slice_rows(h, 1);
            let bw = inner_backward(g, &cfg.model, &self.anchor[h], &xh, &y, Some(&e), &gamma, &beta);
            for (wk, (gz, inp)) in self.w[h].layers.iter_mut().zip(bw.grad_z.iter().zip(&bw.inputs)) {
                let grad = Graph::<T>::matmul_nt(g, gz, inp);
                *wk = Graph::<T>::sub(g, wk, &grad);
            }
            outs.push(apply_inner(g, &cfg.model, &self.w[h], &xb, &gamma, &beta));
        }
        self.pos += 1;
        if self.pos == cfg.mini_batch {
            self.pos = 0;
            self.anchor = self.w.clone();
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        Tensor::concat_rows(&refs).expect("head outputs share a width")
    }

    /// One token of a stand-alone layer: `x_t` is `d × 1` (or length `d`).
    pub fn step(
        &mut self,
        cfg: &TttConfig,
        params: &TttLayerParams<Tensor<T>>,
        x_t: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let d = cfg.embed_dim();
        if x_t.numel() != d {
            return Err(Error::shape("ttt_step", x_t.shape(), &[d]));
        }
        let x = x_t.reshape(&[d, 1])?;
        let g = &mut Eager;
        let views = project_views(g, params, &x);
        let eta = gate_eta(g, cfg, &params.core.theta_lr, &x);
        Ok(self.step_views(cfg, &params.core, &views, &eta))
    }
}
