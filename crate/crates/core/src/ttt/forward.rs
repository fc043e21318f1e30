//! Single-head forward passes over one sequence.

use super::inner::{apply_inner, inner_backward, wrap_output};
use super::{InnerKind, InnerModel, InnerWeights, TttConfig};
use crate::autodiff::{Graph, Segment};
use crate::tensor::Real;

/// One mini-batch of the dual form.
///
/// Inputs: `[W¹ (, W²), train, label, test, eta, gamma, beta]` with the views
/// `hd × b` and `eta` `1 × b`. Outputs: `[W_b¹ (, W_b²), out]`.
#[derive(Debug, Clone, Copy)]
pub struct DualChunk {
    pub model: InnerModel,
}

impl<T: Real> Segment<T> for DualChunk {
    fn run<G: Graph<T>>(&self, g: &mut G, inputs: &[G::V]) -> Vec<G::V> {
        let k = self.model.kind.layers();
        let w = InnerWeights {
            layers: inputs[..k].to_vec(),
        };
        let [train, label, test, eta, gamma, beta] = &inputs[k..] else {
            panic!("dual chunk expects {} inputs, got {}", k + 6, inputs.len());
        };
        let bw = inner_backward(g, &self.model, &w, train, label, Some(eta), gamma, beta);

        let mut out: Vec<G::V> = Vec::with_capacity(k + 1);
        for (wk, (gz, xh)) in w.layers.iter().zip(bw.grad_z.iter().zip(&bw.inputs)) {
            let upd = g.matmul_nt(gz, xh);
            out.push(g.sub(wk, &upd));
        }

        // Z̄^k = W^k X̄^k − ∇Z^k · mask(X̂^kᵀ X̄^k)
        let mut xbar = test.clone();
        let mut zbar = test.clone();
        for (i, (wk, (gz, xh))) in w.layers.iter().zip(bw.grad_z.iter().zip(&bw.inputs)).enumerate() {
            let base = g.matmul(wk, &xbar);
            let gram = g.matmul_tn(xh, &xbar);
            let gram = g.causal_mask(&gram);
            let corr = g.matmul(gz, &gram);
            zbar = g.sub(&base, &corr);
            if self.model.kind == InnerKind::Mlp && i == 0 {
                xbar = g.gelu(&zbar);
            }
        }
        out.push(wrap_output(g, &self.model, test, &zbar, gamma, beta));
        out
    }
}

/// Dual-form forward of one head over one sequence. Returns the outputs
/// (`hd × T`) and the weights after the last token.
#[allow(clippy::too_many_arguments)]
pub fn dual_head<T: Real, G: Graph<T>>(
    g: &mut G,
    cfg: &TttConfig,
    w0: &InnerWeights<G::V>,
    train: &G::V,
    label: &G::V,
    test: &G::V,
    eta: &G::V,
    gamma: &G::V,
    beta: &G::V,
) -> (G::V, InnerWeights<G::V>) {
    let t_len = g.cols(train);
    let b = cfg.mini_batch;
    assert!(t_len % b == 0, "sequence length {t_len} not divisible by {b}");
    let k = cfg.model.kind.layers();
    let seg = DualChunk { model: cfg.model };

    let mut w = w0.layers.clone();
    let mut outs = Vec::with_capacity(t_len / b);
    for start in (0..t_len).step_by(b) {
        let mut inputs = w.clone();
        for v in [train, label, test, eta] {
            inputs.push(if b == t_len { v.clone() } else { g.slice_cols(v, start, b) });
        }
        inputs.push(gamma.clone());
        inputs.push(beta.clone());
        let mut res = if cfg.checkpoint {
            g.checkpoint(seg, &inputs)
        } else {
            seg.run(g, &inputs)
        };
        outs.push(res.pop().expect("chunk output"));
        debug_assert_eq!(res.len(), k);
        w = res;
    }
    let z = if outs.len() == 1 {
        outs.pop().expect("one chunk")
    } else {
        g.concat_cols(&outs)
    };
    (z, InnerWeights { layers: w })
}

/// Primal-form forward of one head: every per-token gradient `G_t` and every
/// `W_t` is materialized. Gradients are taken at the anchor, which advances
/// to the current weights at each mini-batch boundary.
#[allow(clippy::too_many_arguments)]
pub fn primal_head<T: Real, G: Graph<T>>(
    g: &mut G,
    cfg: &TttConfig,
    w0: &InnerWeights<G::V>,
    train: &G::V,
    label: &G::V,
    test: &G::V,
    eta: &G::V,
    gamma: &G::V,
    beta: &G::V,
) -> (G::V, InnerWeights<G::V>) {
    let t_len = g.cols(train);
    let b = cfg.mini_batch;
    assert!(t_len % b == 0, "sequence length {t_len} not divisible by {b}");

    let mut w = w0.clone();
    let mut anchor = w0.clone();
    let mut outs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xh = g.slice_cols(train, t, 1);
        let y = g.slice_cols(label, t, 1);
        let xb = g.slice_cols(test, t, 1);
        let e = g.slice_cols(eta, t, 1);
        let bw = inner_backward(g, &cfg.model, &anchor, &xh, &y, Some(&e), gamma, beta);
        for (wk, (gz, inp)) in w.layers.iter_mut().zip(bw.grad_z.iter().zip(&bw.inputs)) {
            let grad = g.matmul_nt(gz, inp);
            *wk = g.sub(wk, &grad);
        }
        outs.push(apply_inner(g, &cfg.model, &w, &xb, gamma, beta));
        if (t + 1) % b == 0 {
            anchor = w.clone();
        }
    }
    let z = if outs.len() == 1 {
        outs.pop().expect("one token")
    } else {
        g.concat_cols(&outs)
    };
    (z, w)
}
