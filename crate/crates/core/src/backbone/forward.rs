use super::{BackboneKind, BlockConfig, BlockParams, ModelConfig, ModelParams};
use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, LN_EPS};
use crate::ttt::{gate_eta, ttt_views, Form, Views};

/// Depthwise causal convolution over one sequence: output column `t` is
/// `Σ_j kernels[:, j] ⊙ x[:, t − (w−1) + j]`, with zeros before the start.
pub fn causal_conv1d<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || kernels.rank() != 2 || x.rows() != kernels.rows() || kernels.cols() == 0 {
        return Err(Error::shape("causal_conv1d", x.shape(), kernels.shape()));
    }
    Ok(Eager.causal_conv(x, kernels, x.cols().max(1)))
}

fn ln<T: Real, G: Graph<T>>(g: &mut G, x: &G::V, gamma: &G::V, beta: &G::V) -> G::V {
    g.layer_norm_cols(x, gamma, beta, T::c(LN_EPS))
}

/// Causal multi-head softmax attention with `1/√hd` scaling; columns hold
/// back-to-back sequences of `seq_len`.
fn attention<T: Real, G: Graph<T>>(
    g: &mut G,
    heads: usize,
    views: &Views<G::V>,
    seq_len: usize,
) -> G::V {
    let n = g.cols(&views.train);
    let hd = g.rows(&views.train) / heads;
    let scale = T::c(1.0 / (hd as f64).sqrt());
    let mut seqs = Vec::with_capacity(n / seq_len);
    for s in (0..n).step_by(seq_len) {
        let k = g.slice_cols(&views.train, s, seq_len);
        let q = g.slice_cols(&views.test, s, seq_len);
        let v = g.slice_cols(&views.label, s, seq_len);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let kh = g.slice_rows(&k, h * hd, hd);
            let qh = g.slice_rows(&q, h * hd, hd);
            let vh = g.slice_rows(&v, h * hd, hd);
            let scores = g.matmul_tn(&kh, &qh);
            let scores = g.scale(&scores, scale);
            let p = g.causal_softmax(&scores);
            outs.push(g.matmul(&vh, &p));
        }
        seqs.push(if heads == 1 { outs.pop().expect("one head") } else { g.concat_rows(&outs) });
    }
    if seqs.len() == 1 {
        seqs.pop().expect("one sequence")
    } else {
        g.concat_cols(&seqs)
    }
}

/// One residual block on `x` (`d × N`, back-to-back sequences of `seq_len`).
pub fn block_forward<T: Real, G: Graph<T>>(
    g: &mut G,
    cfg: &BlockConfig,
    p: &BlockParams<G::V>,
    x: &G::V,
    seq_len: usize,
    form: Form,
) -> G::V {
    let xn = ln(g, x, &p.ln1_g, &p.ln1_b);
    let label = g.matmul(&p.theta_v, &xn);
    let (train, test) = match cfg.backbone {
        BackboneKind::Transformer => {
            let q = p.theta_q.as_ref().expect("transformer block has theta_q");
            (g.matmul(&p.theta_k, &xn), g.matmul(q, &xn))
        }
        BackboneKind::Mamba => {
            let shared = g.matmul(&p.theta_k, &xn);
            let ck = p.conv_k.as_ref().expect("mamba block has conv_k");
            let cq = p.conv_q.as_ref().expect("mamba block has conv_q");
            (g.causal_conv(&shared, ck, seq_len), g.causal_conv(&shared, cq, seq_len))
        }
    };
    let views = Views { train, label, test };

    let mut y = match (cfg.ttt(), &p.ttt) {
        (Some(tc), Some(core)) => {
            let eta = gate_eta(g, &tc, &core.theta_lr, &xn);
            let z = ttt_views(g, &tc, core, &views, &eta, seq_len, form).z;
            let lg = p.ln_o_g.as_ref().expect("ttt block has ln_o");
            let lb = p.ln_o_b.as_ref().expect("ttt block has ln_o");
            ln(g, &z, lg, lb)
        }
        (None, None) => attention(g, cfg.heads, &views, seq_len),
        _ => panic!("block parameters do not match the sequence layer kind"),
    };
    if cfg.backbone == BackboneKind::Mamba {
        let gate = g.matmul(p.gate.as_ref().expect("mamba block has gate"), &xn);
        let gate = g.gelu(&gate);
        y = g.mul(&gate, &y);
    }
    let o = g.matmul(&p.w_o, &y);
    let x = g.add(x, &o);

    let xn = ln(g, &x, &p.ln2_g, &p.ln2_b);
    let h = g.matmul(&p.mlp_in, &xn);
    let h = g.gelu(&h);
    let o = g.matmul(&p.mlp_out, &h);
    g.add(&x, &o)
}

/// Logits (`V × N`) for `tokens` laid out as back-to-back sequences of
/// `seq_len`. Tokens must already be range-checked.
pub fn lm_forward<T: Real, G: Graph<T>>(
    g: &mut G,
    cfg: &ModelConfig,
    p: &ModelParams<G::V>,
    tokens: &[usize],
    seq_len: usize,
    form: Form,
) -> G::V {
    assert!(seq_len > 0 && tokens.len() % seq_len == 0, "tokens are not whole sequences");
    let mut x = g.gather_cols(&p.embed, tokens);
    if let Some(pos) = &p.pos {
        let one = g.slice_cols(pos, 0, seq_len);
        let all = if tokens.len() == seq_len {
            one
        } else {
            let reps = vec![one; tokens.len() / seq_len];
            g.concat_cols(&reps)
        };
        x = g.add(&x, &all);
    }
    for b in &p.blocks {
        x = block_forward(g, &cfg.block, b, &x, seq_len, form);
    }
    let h = ln(g, &x, &p.ln_f_g, &p.ln_f_b);
    match &p.head {
        Some(w) => g.matmul(w, &h),
        None => g.matmul_tn(&p.embed, &h),
    }
}

/// Target of position `i` is the next token of the same sequence.
pub fn next_token_targets(tokens: &[usize], seq_len: usize) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| ((i + 1) % seq_len != 0).then(|| tokens[i + 1]))
        .collect()
}

/// Mean next-token cross-entropy.
pub fn next_token_loss<T: Real, G: Graph<T>>(g: &mut G, logits: &G::V, tokens: &[usize], seq_len: usize) -> G::V {
    g.cross_entropy(logits, &next_token_targets(tokens, seq_len))
}

/// Checks the inputs to [`lm_forward`].
pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize], seq_len: usize) -> Result<()> {
    if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
        return Err(Error::Config(format!(
            "{} tokens do not form whole sequences of {seq_len}",
            tokens.len()
        )));
    }
    if cfg.pos_embedding && seq_len > cfg.seq_len {
        return Err(Error::Config(format!(
            "sequence length {seq_len} exceeds the positional table ({})",
            cfg.seq_len
        )));
    }
    if let Some(t) = cfg.block.ttt() {
        t.validate_len(seq_len)?;
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenRange {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Validated eager forward of one or more sequences.
pub fn lm_logits<T: Real>(
    cfg: &ModelConfig,
    p: &ModelParams<Tensor<T>>,
    tokens: &[usize],
    seq_len: usize,
    form: Form,
) -> Result<Tensor<T>> {
    p.validate(cfg)?;
    check_tokens(cfg, tokens, seq_len)?;
    Ok(lm_forward(&mut Eager, cfg, p, tokens, seq_len, form))
}

/// Mean next-token loss of eager logits.
pub fn next_token_loss_value<T: Real>(logits: &Tensor<T>, tokens: &[usize], seq_len: usize) -> Result<T> {
    if seq_len < 2 {
        return Err(Error::Config("next-token loss needs at least 2 tokens per sequence".into()));
    }
    if logits.cols() != tokens.len() || tokens.len() % seq_len != 0 {
        return Err(Error::shape("next_token_loss", logits.shape(), &[logits.rows(), tokens.len()]));
    }
    Ok(next_token_loss(&mut Eager, logits, tokens, seq_len).item())
}
