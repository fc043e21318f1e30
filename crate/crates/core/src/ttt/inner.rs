use super::{InnerKind, InnerModel, InnerWeights, TttConfig, TttLayerParams};
use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Real, Tensor};

struct LayerPass<V> {
    /// Input to each inner layer, `X̂^k`.
    inputs: Vec<V>,
    /// Pre-activation of each inner layer, `Z^k = W^k X̂^k`.
    pre: Vec<V>,
}

fn layer_pass<T: Real, G: Graph<T>>(g: &mut G, kind: InnerKind, w: &[G::V], x: &G::V) -> LayerPass<G::V> {
    match kind {
        InnerKind::Linear => {
            let z = g.matmul(&w[0], x);
            LayerPass {
                inputs: vec![x.clone()],
                pre: vec![z],
            }
        }
        InnerKind::Mlp => {
            let z1 = g.matmul(&w[0], x);
            let x2 = g.gelu(&z1);
            let z2 = g.matmul(&w[1], &x2);
            LayerPass {
                inputs: vec![x.clone(), x2],
                pre: vec![z1, z2],
            }
        }
    }
}

/// `x + LN(res)` per column, or `res` itself in bare mode.
pub(crate) fn wrap_output<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &InnerModel,
    x: &G::V,
    res: &G::V,
    gamma: &G::V,
    beta: &G::V,
) -> G::V {
    if model.bare {
        return res.clone();
    }
    let ln = g.layer_norm_cols(res, gamma, beta, T::c(model.ln_eps));
    g.add(x, &ln)
}

/// `f(x; W)` applied to every column of `x`.
pub fn apply_inner<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &InnerModel,
    w: &InnerWeights<G::V>,
    x: &G::V,
    gamma: &G::V,
    beta: &G::V,
) -> G::V {
    let pass = layer_pass(g, model.kind, &w.layers, x);
    let res = pass.pre.last().expect("at least one layer").clone();
    wrap_output(g, model, x, &res, gamma, beta)
}

/// Per-column gradients of the reconstruction loss at fixed weights,
/// expressed through the layer pre-activations: the gradient of token `t`'s
/// loss w.r.t. `W^k` is `grad_z[k][:, t] · inputs[k][:, t]ᵀ`.
pub struct InnerBackward<V> {
    pub grad_z: Vec<V>,
    pub inputs: Vec<V>,
}

/// Backward pass of `Σ_t η_t ‖f(x̂_t; W) − y_t‖²` w.r.t. each layer's
/// pre-activations, with `η_t` folded into column `t` (all ones when `eta`
/// is `None`).
#[allow(clippy::too_many_arguments)]
pub fn inner_backward<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &InnerModel,
    w: &InnerWeights<G::V>,
    train: &G::V,
    label: &G::V,
    eta: Option<&G::V>,
    gamma: &G::V,
    beta: &G::V,
) -> InnerBackward<G::V> {
    let pass = layer_pass(g, model.kind, &w.layers, train);
    let res = pass.pre.last().expect("at least one layer").clone();
    let two = T::c(2.0 * model.grad_sign());

    let mut grad_res = if model.bare {
        let diff = g.sub(&res, label);
        g.scale(&diff, two)
    } else {
        let (n, inv) = g.ln_normalize(&res, T::c(model.ln_eps));
        let ln = g.row_scale(&n, gamma);
        let ln = g.add_col(&ln, beta);
        let out = g.add(train, &ln);
        let diff = g.sub(&out, label);
        let up = g.scale(&diff, two);
        let up = match eta {
            Some(e) => g.col_scale(&up, e),
            None => up,
        };
        g.layer_norm_cols_vjp(&n, &inv, gamma, &up)
    };
    if model.bare {
        if let Some(e) = eta {
            grad_res = g.col_scale(&grad_res, e);
        }
    }

    let grad_z = match model.kind {
        InnerKind::Linear => vec![grad_res],
        InnerKind::Mlp => {
            let gx2 = g.matmul_tn(&w.layers[1], &grad_res);
            let d1 = g.gelu_prime(&pass.pre[0]);
            let gz1 = g.mul(&d1, &gx2);
            vec![gz1, grad_res]
        }
    };
    InnerBackward {
        grad_z,
        inputs: pass.inputs,
    }
}

fn head_rows<T: Real>(t: &Tensor<T>, h: usize, hd: usize) -> Tensor<T> {
    t.slice_rows(h * hd, hd)
}

fn as_column<T: Real>(x: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    if x.numel() != d || x.cols() != 1 {
        return Err(Error::shape("token", x.shape(), &[d]));
    }
    x.reshape(&[d, 1])
}

fn check_weights<T: Real>(cfg: &TttConfig, w: &[InnerWeights<Tensor<T>>]) -> Result<()> {
    if w.len() != cfg.heads {
        return Err(Error::Config(format!(
            "{} weight sets for {} heads",
            w.len(),
            cfg.heads
        )));
    }
    let shapes = cfg.model.kind.weight_shapes(cfg.head_dim);
    for (h, hw) in w.iter().enumerate() {
        if hw.layers.len() != shapes.len() {
            return Err(Error::Config(format!("head {h}: wrong number of inner layers")));
        }
        for (k, (t, s)) in hw.layers.iter().zip(&shapes).enumerate() {
            super::check_shape(&format!("W.h{h}.w{}", k + 1), t, s)?;
        }
    }
    Ok(())
}

/// `f(x; W)` for a single vector `x` of the head dimension. `gamma`/`beta`
/// are the inner LN parameters (ignored in bare mode).
pub fn inner_model_apply<T: Real>(
    model: &InnerModel,
    w: &InnerWeights<Tensor<T>>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let hd = x.numel();
    let shapes = model.kind.weight_shapes(hd);
    if w.layers.len() != shapes.len() {
        return Err(Error::Config("wrong number of inner layers".into()));
    }
    for (k, (t, s)) in w.layers.iter().zip(&shapes).enumerate() {
        super::check_shape(&format!("w{}", k + 1), t, s)?;
    }
    if !model.bare {
        if hd < 2 {
            return Err(Error::Degenerate("inner layer norm over < 2 features".into()));
        }
        super::check_shape("ln_gamma", gamma, &[hd, 1])?;
        super::check_shape("ln_beta", beta, &[hd, 1])?;
    }
    let xc = as_column(x, hd)?;
    let out = apply_inner(&mut Eager, model, w, &xc, gamma, beta);
    out.reshape(&[hd])
}

/// `ℓ(W; x_t) = Σ_h ‖f(θ_K x_t; W_h) − θ_V x_t‖²`.
pub fn inner_loss<T: Real>(
    cfg: &TttConfig,
    params: &TttLayerParams<Tensor<T>>,
    w: &[InnerWeights<Tensor<T>>],
    x_t: &Tensor<T>,
) -> Result<T> {
    params.validate(cfg)?;
    check_weights(cfg, w)?;
    let x = as_column(x_t, cfg.embed_dim())?;
    let hd = cfg.head_dim;
    let xk = params.theta_k.matmul(&x)?;
    let xv = params.theta_v.matmul(&x)?;
    let mut total = T::zero();
    for (h, hw) in w.iter().enumerate() {
        let gamma = head_rows(&params.core.ln_gamma, h, hd);
        let beta = head_rows(&params.core.ln_beta, h, hd);
        let f = apply_inner(&mut Eager, &cfg.model, hw, &head_rows(&xk, h, hd), &gamma, &beta);
        total += f.sub(&head_rows(&xv, h, hd))?.sum_sq();
    }
    Ok(total)
}

/// Exact gradient of [`inner_loss`] w.r.t. the inner weights, per head.
pub fn inner_grad<T: Real>(
    cfg: &TttConfig,
    params: &TttLayerParams<Tensor<T>>,
    w: &[InnerWeights<Tensor<T>>],
    x_t: &Tensor<T>,
) -> Result<Vec<InnerWeights<Tensor<T>>>> {
    params.validate(cfg)?;
    check_weights(cfg, w)?;
    let x = as_column(x_t, cfg.embed_dim())?;
    let hd = cfg.head_dim;
    let xk = params.theta_k.matmul(&x)?;
    let xv = params.theta_v.matmul(&x)?;
    let mut out = Vec::with_capacity(cfg.heads);
    for (h, hw) in w.iter().enumerate() {
        let gamma = head_rows(&params.core.ln_gamma, h, hd);
        let beta = head_rows(&params.core.ln_beta, h, hd);
        let bw = inner_backward(
            &mut Eager,
            &cfg.model,
            hw,
            &head_rows(&xk, h, hd),
            &head_rows(&xv, h, hd),
            None,
            &gamma,
            &beta,
        );
        let layers = bw
            .grad_z
            .iter()
            .zip(&bw.inputs)
            .map(|(gz, inp)| gz.matmul_nt(inp))
            .collect::<Result<Vec<_>>>()?;
        out.push(InnerWeights { layers });
    }
    Ok(out)
}

/// `η(x_t) = η_base · σ(θ_lr · x_t)`.
pub fn eta_gate<T: Real>(x_t: &Tensor<T>, theta_lr: &Tensor<T>, eta_base: T) -> Result<T> {
    if x_t.numel() != theta_lr.numel() {
        return Err(Error::shape("eta_gate", x_t.shape(), theta_lr.shape()));
    }
    Ok(eta_base * sigmoid(x_t.dot(theta_lr)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ttt::{InitScheme, TttCore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ident_params(d: usize, cfg: &TttConfig) -> TttLayerParams<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        TttLayerParams {
            theta_k: Tensor::eye(d),
            theta_q: Tensor::eye(d),
            theta_v: Tensor::eye(d),
            core: TttCore::init(cfg, d, InitScheme::Zeros, &mut rng),
        }
    }

    fn rvec(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn bare_linear_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = InnerModel::linear().bare();
        let x = rvec(&mut rng, 4);
        let g = Tensor::zeros(&[4, 1]);
        let zero = InnerWeights::zeros(InnerKind::Linear, 4);
        assert_eq!(inner_model_apply(&m, &zero, &g, &g, &x).unwrap(), Tensor::zeros(&[4]));
        let id = InnerWeights { layers: vec![Tensor::eye(4)] };
        assert_eq!(inner_model_apply(&m, &id, &g, &g, &x).unwrap(), x);
    }

    #[test]
    fn mlp_with_ln_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let w1: Tensor = Tensor::from_fn(16, 4, |_, _| rng.random_range(-1.0..1.0));
        let w2: Tensor = Tensor::from_fn(4, 16, |_, _| rng.random_range(-1.0..1.0));
        let gamma = rvec(&mut rng, d).map(|v| v + 1.5);
        let beta = rvec(&mut rng, d);
        let x = rvec(&mut rng, d);
        let w = InnerWeights { layers: vec![w1.clone(), w2.clone()] };
        let got = inner_model_apply(
            &InnerModel::mlp(),
            &w,
            &gamma.reshape(&[d, 1]).unwrap(),
            &beta.reshape(&[d, 1]).unwrap(),
            &x,
        )
        .unwrap();
        // independent composition from tensor-core kernels
        let h = w1.matmul(&x.reshape(&[d, 1]).unwrap()).unwrap().map(crate::tensor::gelu);
        let res = w2.matmul(&h).unwrap().reshape(&[d]).unwrap();
        let ln = crate::tensor::layer_norm(&res, &gamma, &beta, crate::tensor::LN_EPS).unwrap();
        let expected = x.add(&ln).unwrap();
        assert!(got.max_abs_diff(&expected) <= 1e-14);
    }

    #[test]
    fn loss_examples() {
        let d = 4;
        let cfg = TttConfig::new(InnerModel::linear().bare(), 1, d, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ident_params(d, &cfg);
        let x = rvec(&mut rng, d);
        let id = vec![InnerWeights { layers: vec![Tensor::eye(d)] }];
        assert_eq!(inner_loss(&cfg, &p, &id, &x).unwrap(), 0.0);

        p.theta_v = Tensor::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let zero = vec![InnerWeights::zeros(InnerKind::Linear, d)];
        let vx = p.theta_v.matmul(&x.reshape(&[d, 1]).unwrap()).unwrap();
        assert!((inner_loss(&cfg, &p, &zero, &x).unwrap() - vx.sum_sq()).abs() < 1e-15);
    }

    #[test]
    fn grad_examples() {
        let d = 3;
        let cfg = TttConfig::new(InnerModel::linear().bare(), 1, d, 1);
        let p = ident_params(d, &cfg);
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let zero = vec![InnerWeights::zeros(InnerKind::Linear, d)];
        let g = inner_grad(&cfg, &p, &zero, &x).unwrap();
        let xc = x.reshape(&[d, 1]).unwrap();
        let expected = xc.matmul_nt(&xc).unwrap().scale(-2.0);
        assert!(g[0].layers[0].max_abs_diff(&expected) < 1e-15);

        let g0 = inner_grad(&cfg, &p, &zero, &Tensor::vector(vec![0.0; d])).unwrap();
        assert_eq!(g0[0].layers[0].max_abs(), 0.0);
    }

    fn fd_check(model: InnerModel, heads: usize, hd: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TttConfig::new(model, heads, hd, 1);
        let mut p = TttLayerParams::init(&cfg, InitScheme::Uniform, &mut rng);
        let n = cfg.embed_dim();
        p.core.ln_gamma = Tensor::from_fn(n, 1, |_, _| rng.random_range(0.5..1.5));
        p.core.ln_beta = Tensor::from_fn(n, 1, |_, _| rng.random_range(-0.5..0.5));
        let w: Vec<_> = p.core.init.clone();
        let x = rvec(&mut rng, cfg.embed_dim());
        let grads = inner_grad(&cfg, &p, &w, &x).unwrap();
        let h = 1e-5;
        for head in 0..heads {
            for k in 0..w[head].layers.len() {
                for e in 0..w[head].layers[k].numel() {
                    let mut wp = w.clone();
                    wp[head].layers[k].data_mut()[e] += h;
                    let mut wm = w.clone();
                    wm[head].layers[k].data_mut()[e] -= h;
                    let fd = (inner_loss(&cfg, &p, &wp, &x).unwrap()
                        - inner_loss(&cfg, &p, &wm, &x).unwrap())
                        / (2.0 * h);
                    let a = grads[head].layers[k].data()[e];
                    assert!(
                        (fd - a).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0),
                        "head {head} layer {k} entry {e}: fd {fd} vs {a}"
                    );
                }
            }
        }
    }

    #[test]
    fn mlp_ln_gradient_matches_finite_differences() {
        fd_check(InnerModel::mlp(), 1, 4, 4);
        fd_check(InnerModel::mlp(), 2, 4, 5);
    }

    #[test]
    fn linear_ln_and_bare_gradients_match_finite_differences() {
        fd_check(InnerModel::linear(), 2, 4, 6);
        fd_check(InnerModel::linear().bare(), 1, 5, 7);
        fd_check(InnerModel::mlp().bare(), 1, 3, 8);
    }

    #[test]
    fn gate_examples() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(eta_gate(&x, &Tensor::vector(vec![0.0, 0.0]), 0.8).unwrap(), 0.4);
        let big: f64 = eta_gate(&x, &Tensor::vector(vec![400.0, 400.0]), 0.8).unwrap();
        assert!((big - 0.8).abs() < 1e-15);
        let ln3 = 3.0f64.ln();
        let v = eta_gate(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![ln3]), 1.0).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
    }
}
