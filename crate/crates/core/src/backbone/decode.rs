use super::{BackboneKind, BlockParams, ModelConfig, ModelParams};
use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, LN_EPS};
use crate::ttt::{gate_eta, TttConfig, TttState, Views};

enum SeqState<T: Real> {
    Ttt(TttConfig, TttState<T>),
    Attn { keys: Vec<Tensor<T>>, values: Vec<Tensor<T>> },
}

struct BlockState<T: Real> {
    seq: SeqState<T>,
    /// Recent columns of the shared `θ_KQ` stream, oldest first.
    conv_hist: Vec<Tensor<T>>,
}

/// Token-by-token evaluation of the model. TTT layers step their primal
/// state, so mini-batch boundaries fall exactly where they do in training.
pub struct Decoder<'a, T: Real = f64> {
    cfg: &'a ModelConfig,
    p: &'a ModelParams<Tensor<T>>,
    blocks: Vec<BlockState<T>>,
    pos: usize,
}

fn ln<T: Real>(x: &Tensor<T>, g: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    Eager.layer_norm_cols(x, g, b, T::c(LN_EPS))
}

impl<'a, T: Real> Decoder<'a, T> {
    pub fn new(cfg: &'a ModelConfig, p: &'a ModelParams<Tensor<T>>) -> Result<Self> {
        p.validate(cfg)?;
        let blocks = p
            .blocks
            .iter()
            .map(|b| BlockState {
                seq: match (cfg.block.ttt(), &b.ttt) {
                    (Some(tc), Some(core)) => SeqState::Ttt(tc, TttState::new(core)),
                    _ => SeqState::Attn {
                        keys: Vec::new(),
                        values: Vec::new(),
                    },
                },
                conv_hist: Vec::new(),
            })
            .collect();
        Ok(Self { cfg, p, blocks, pos: 0 })
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes `token` and returns the next-token logits (`V × 1`).
    pub fn step(&mut self, token: usize) -> Result<Tensor<T>> {
        if token >= self.cfg.vocab_size {
            return Err(Error::TokenRange {
                token,
                vocab: self.cfg.vocab_size,
            });
        }
        let g = &mut Eager;
        let mut x = self.p.embed.column(token);
        if let Some(pos) = &self.p.pos {
            if self.pos >= pos.cols() {
                return Err(Error::Config(format!(
                    "position {} is past the positional table ({})",
                    self.pos,
                    pos.cols()
                )));
            }
            x = x.add(&pos.column(self.pos))?;
        }
        for (b, st) in self.p.blocks.iter().zip(self.blocks.iter_mut()) {
            x = block_step(self.cfg, b, st, &x)?;
        }
        let h = ln(&x, &self.p.ln_f_g, &self.p.ln_f_b);
        self.pos += 1;
        Ok(match &self.p.head {
            Some(w) => Graph::<T>::matmul(g, w, &h),
            None => Graph::<T>::matmul_tn(g, &self.p.embed, &h),
        })
    }
}

fn conv_step<T: Real>(hist: &[Tensor<T>], kernels: &Tensor<T>) -> Tensor<T> {
    let w = kernels.cols();
    let d = kernels.rows();
    let t = hist.len() - 1;
    let mut out = Tensor::zeros(&[d, 1]);
    for c in 0..d {
        let mut acc = T::zero();
        for j in 0..w {
            let back = w - 1 - j;
            if back <= t {
                acc += kernels.at(c, j) * hist[t - back].at(c, 0);
            }
        }
        out.set(c, 0, acc);
    }
    out
}

fn block_step<T: Real>(cfg: &ModelConfig, p: &BlockParams<Tensor<T>>, st: &mut BlockState<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let bc = &cfg.block;
    let xn = ln(x, &p.ln1_g, &p.ln1_b);
    let label = p.theta_v.matmul(&xn)?;
    let (train, test) = match bc.backbone {
        BackboneKind::Transformer => {
            let q = p.theta_q.as_ref().expect("transformer block has theta_q");
            (p.theta_k.matmul(&xn)?, q.matmul(&xn)?)
        }
        BackboneKind::Mamba => {
            st.conv_hist.push(p.theta_k.matmul(&xn)?);
            let w = bc.conv_width;
            let k = conv_step(&st.conv_hist, p.conv_k.as_ref().expect("conv_k"));
            let q = conv_step(&st.conv_hist, p.conv_q.as_ref().expect("conv_q"));
            if st.conv_hist.len() >= w {
                st.conv_hist.remove(0);
            }
            (k, q)
        }
    };

    let mut y = match &mut st.seq {
        SeqState::Ttt(tc, state) => {
            let core = p.ttt.as_ref().expect("ttt block has core");
            let eta = gate_eta(&mut Eager, tc, &core.theta_lr, &xn);
            let z = state.step_views(tc, core, &Views { train, label, test }, &eta);
            ln(&z, p.ln_o_g.as_ref().expect("ln_o"), p.ln_o_b.as_ref().expect("ln_o"))
        }
        SeqState::Attn { keys, values } => {
            keys.push(train);
            values.push(label);
            let hd = bc.head_dim();
            let scale = T::c(1.0 / (hd as f64).sqrt());
            let n = keys.len();
            let mut out = Tensor::zeros(&[bc.embed_dim, 1]);
            for h in 0..bc.heads {
                let r = h * hd;
                let scores: Vec<T> = keys
                    .iter()
                    .map(|k| (0..hd).fold(T::zero(), |a, i| a + k.at(r + i, 0) * test.at(r + i, 0)) * scale)
                    .collect();
                let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let e: Vec<T> = scores.iter().map(|&s| (s - mx).exp()).collect();
                let total = e.iter().copied().fold(T::zero(), |a, b| a + b);
                for i in 0..hd {
                    let acc = (0..n).fold(T::zero(), |a, s| a + values[s].at(r + i, 0) * (e[s] / total));
                    out.set(r + i, 0, acc);
                }
            }
            out
        }
    };
    if bc.backbone == BackboneKind::Mamba {
        let gate = p.gate.as_ref().expect("gate").matmul(&xn)?.map(crate::tensor::gelu);
        y = gate.mul(&y)?;
    }
    let x = x.add(&p.w_o.matmul(&y)?)?;
    let xn = ln(&x, &p.ln2_g, &p.ln2_b);
    let h = p.mlp_in.matmul(&xn)?.map(crate::tensor::gelu);
    x.add(&p.mlp_out.matmul(&h)?)
}
