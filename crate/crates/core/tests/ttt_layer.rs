use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttt_core::autodiff::{grad_check, Eager, Graph, NodeId, Tape};
use ttt_core::tensor::{causal_mask, randn};
use ttt_core::ttt::{
    eta_gate, inner_grad, inner_loss, inner_model_apply, multihead_forward, ttt_forward_dual,
    ttt_forward_primal, ttt_layer, EtaMode, Form, InitScheme, InnerKind, InnerModel, InnerWeights,
    TttConfig, TttCore, TttLayerParams, TttState, Views,
};
use ttt_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random layer with non-trivial gate, LN affine and θ_init.
fn random_layer(cfg: &TttConfig, r: &mut ChaCha8Rng) -> TttLayerParams<Tensor> {
    let mut p = TttLayerParams::init(cfg, InitScheme::Uniform, r);
    let d = cfg.embed_dim();
    p.core.theta_lr = randn(cfg.heads, d, 0.5, r);
    p.core.ln_gamma = Tensor::from_fn(d, 1, |_, _| r.random_range(0.5..1.5));
    p.core.ln_beta = Tensor::from_fn(d, 1, |_, _| r.random_range(-0.3..0.3));
    for w in &mut p.core.init {
        for l in &mut w.layers {
            *l = l.scale(0.5);
        }
    }
    p
}

fn identity_layer(cfg: &TttConfig) -> TttLayerParams<Tensor> {
    let d = cfg.embed_dim();
    TttLayerParams {
        theta_k: Tensor::eye(d),
        theta_q: Tensor::eye(d),
        theta_v: Tensor::eye(d),
        core: TttCore::init(cfg, d, InitScheme::Zeros, &mut rng(0)),
    }
}

fn column(x: &Tensor, t: usize) -> Tensor {
    x.column(t).reshape(&[x.rows()]).unwrap()
}

/// Literal token loop built from the per-token API only.
fn loop_oracle(
    cfg: &TttConfig,
    p: &TttLayerParams<Tensor>,
    x: &Tensor,
    anchor_every: usize,
) -> (Tensor, Vec<InnerWeights<Tensor>>) {
    let hd = cfg.head_dim;
    let mut w = p.core.init.clone();
    let mut anchor = w.clone();
    let mut cols = Vec::new();
    for t in 0..x.cols() {
        let xt = column(x, t);
        let g = inner_grad(cfg, p, &anchor, &xt).unwrap();
        let q = p.theta_q.matmul(&xt.reshape(&[xt.numel(), 1]).unwrap()).unwrap();
        let mut z = Vec::new();
        for h in 0..cfg.heads {
            let eta = match cfg.eta {
                EtaMode::Gate => {
                    eta_gate(&xt, &column(&p.core.theta_lr.transpose(), h), cfg.eta_base).unwrap()
                }
                EtaMode::Fixed(v) => v,
            };
            for (wk, gk) in w[h].layers.iter_mut().zip(&g[h].layers) {
                wk.axpy(-eta, gk);
            }
            let out = inner_model_apply(
                &cfg.model,
                &w[h],
                &p.core.ln_gamma.slice_rows(h * hd, hd),
                &p.core.ln_beta.slice_rows(h * hd, hd),
                &q.slice_rows(h * hd, hd).reshape(&[hd]).unwrap(),
            )
            .unwrap();
            z.extend_from_slice(out.data());
        }
        cols.push(Tensor::vector(z).reshape(&[cfg.embed_dim(), 1]).unwrap());
        if (t + 1) % anchor_every == 0 {
            anchor = w.clone();
        }
    }
    let refs: Vec<&Tensor> = cols.iter().collect();
    (Tensor::concat_cols(&refs).unwrap(), w)
}

fn models() -> Vec<InnerModel> {
    vec![
        InnerModel::linear(),
        InnerModel::linear().bare(),
        InnerModel::mlp(),
        InnerModel::mlp().bare(),
    ]
}

#[test]
fn primal_dual_equivalence_grid() {
    let mut seed = 0;
    for model in models() {
        for d in [4, 8] {
            for t in [8, 32] {
                for b in [1, 4, t] {
                    seed += 1;
                    let cfg = TttConfig::new(model, 1, d, b);
                    let mut r = rng(seed);
                    let p = random_layer(&cfg, &mut r);
                    let x = randn(d, t, 1.0, &mut r);
                    let (zp, wp) = ttt_forward_primal(&cfg, &p, &x).unwrap();
                    let (zd, wd) = ttt_forward_dual(&cfg, &p, &x).unwrap();
                    assert!(zp.is_finite());
                    let ez = zd.rel_diff(&zp);
                    let ew = wd[0].rel_diff(&wp[0]);
                    assert!(ez <= 1e-10 && ew <= 1e-10, "{model:?} d={d} T={t} b={b}: z {ez:e} w {ew:e}");
                }
            }
        }
    }
}

#[test]
fn primal_matches_literal_token_loop() {
    for (i, model) in models().into_iter().enumerate() {
        for b in [1, 4, 16] {
            let cfg = TttConfig::new(model, 2, 4, b);
            let mut r = rng(100 + i as u64);
            let p = random_layer(&cfg, &mut r);
            let x = randn(8, 16, 1.0, &mut r);
            let (z, w) = ttt_forward_primal(&cfg, &p, &x).unwrap();
            let (zo, wo) = loop_oracle(&cfg, &p, &x, b);
            assert!(z.rel_diff(&zo) <= 1e-12, "{model:?} b={b}");
            for h in 0..2 {
                assert!(w[h].rel_diff(&wo[h]) <= 1e-12);
            }
        }
    }
}

#[test]
fn batch_gd_takes_every_gradient_at_w0() {
    let cfg = TttConfig::new(InnerModel::mlp(), 1, 4, 8);
    let mut r = rng(7);
    let p = random_layer(&cfg, &mut r);
    let x = randn(4, 8, 1.0, &mut r);
    let (_, w) = ttt_forward_dual(&cfg, &p, &x).unwrap();
    let mut expected = p.core.init[0].clone();
    for t in 0..8 {
        let xt = column(&x, t);
        let g = inner_grad(&cfg, &p, &p.core.init, &xt).unwrap();
        let eta = eta_gate(&xt, &column(&p.core.theta_lr.transpose(), 0), cfg.eta_base).unwrap();
        for (wk, gk) in expected.layers.iter_mut().zip(&g[0].layers) {
            wk.axpy(-eta, gk);
        }
    }
    assert!(w[0].rel_diff(&expected) <= 1e-12);
}

#[test]
fn single_step_closed_form() {
    let mut cfg = TttConfig::new(InnerModel::linear().bare(), 1, 3, 1);
    cfg.eta = EtaMode::Fixed(0.5);
    let p = identity_layer(&cfg);
    let x = Tensor::vector(vec![0.3, -1.2, 0.7]);
    let mut state = TttState::new(&p.core);
    let z = state.step(&cfg, &p, &x).unwrap();
    let expected = x.scale(x.sum_sq());
    assert!(z.reshape(&[3]).unwrap().max_abs_diff(&expected) <= 1e-15);

    let (z1, _) = ttt_forward_primal(&cfg, &p, &x.reshape(&[3, 1]).unwrap()).unwrap();
    assert_eq!(z1, z);
}

#[test]
fn zero_token_leaves_state_unchanged() {
    let cfg = TttConfig::new(InnerModel::mlp(), 2, 4, 4);
    let mut r = rng(9);
    let p = random_layer(&cfg, &mut r);
    let mut state = TttState::new(&p.core);
    for _ in 0..2 {
        state.step(&cfg, &p, &randn(8, 1, 1.0, &mut r)).unwrap();
    }
    let before = state.weights().to_vec();
    let z = state.step(&cfg, &p, &Tensor::zeros(&[8, 1])).unwrap();
    for h in 0..2 {
        assert_eq!(state.weights()[h], before[h]);
        let out = inner_model_apply(
            &cfg.model,
            &before[h],
            &p.core.ln_gamma.slice_rows(h * 4, 4),
            &p.core.ln_beta.slice_rows(h * 4, 4),
            &Tensor::zeros(&[4]),
        )
        .unwrap();
        assert_eq!(z.slice_rows(h * 4, 4).data(), out.data());
    }
}

#[test]
fn exact_step_size_zeroes_the_loss() {
    let cfg = TttConfig::new(InnerModel::linear().bare(), 1, 6, 1);
    let mut r = rng(11);
    let mut p = random_layer(&cfg, &mut r);
    p.core.init[0].layers[0] = randn(6, 6, 0.5, &mut r);
    let mut state = TttState::new(&p.core);
    for _ in 0..20 {
        let x = randn(6, 1, 1.0, &mut r);
        let xk = p.theta_k.matmul(&x).unwrap();
        let views = Views {
            train: xk.clone(),
            label: p.theta_v.matmul(&x).unwrap(),
            test: p.theta_q.matmul(&x).unwrap(),
        };
        let eta = Tensor::full(&[1, 1], 1.0 / (2.0 * xk.sum_sq()));
        state.step_views(&cfg, &p.core, &views, &eta);
        let post = inner_loss(&cfg, &p, state.weights(), &x.reshape(&[6]).unwrap()).unwrap();
        assert!(post <= 1e-20, "post-step loss {post:e}");
    }
}

fn contraction_holds(seed: u64, d: usize, t: usize, frac: f64) -> Result<(), TestCaseError> {
    let cfg = TttConfig::new(InnerModel::linear().bare(), 1, d, 1);
    let mut r = rng(seed);
    let p = random_layer(&cfg, &mut r);
    let mut state = TttState::new(&p.core);
    for _ in 0..t {
        let x = randn(d, 1, 1.0, &mut r);
        let xv = x.reshape(&[d]).unwrap();
        let xk = p.theta_k.matmul(&x).unwrap();
        let before = inner_loss(&cfg, &p, state.weights(), &xv).unwrap();
        let views = Views {
            train: xk.clone(),
            label: p.theta_v.matmul(&x).unwrap(),
            test: p.theta_q.matmul(&x).unwrap(),
        };
        let eta = Tensor::full(&[1, 1], frac / xk.sum_sq());
        state.step_views(&cfg, &p.core, &views, &eta);
        let after = inner_loss(&cfg, &p, state.weights(), &xv).unwrap();
        prop_assert!(after < before, "{after} !< {before}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inner_loss_contracts(seed in any::<u64>(), d in 2usize..8, frac in 0.01f64..0.99) {
        contraction_holds(seed, d, 12, frac)?;
    }

    #[test]
    fn gate_stays_in_open_interval(seed in any::<u64>(), base in 0.01f64..2.0, scale in 0.0f64..5.0) {
        let mut r = rng(seed);
        let x = randn(6, 1, 1.0, &mut r);
        let th = randn(6, 1, scale, &mut r);
        let eta = eta_gate(&x, &th, base).unwrap();
        prop_assert!(eta > 0.0 && eta < base);
    }

    #[test]
    fn streaming_equals_primal(seed in any::<u64>(), b in prop::sample::select(vec![1usize, 2, 4]), mlp in any::<bool>()) {
        let model = if mlp { InnerModel::mlp() } else { InnerModel::linear() };
        let cfg = TttConfig::new(model, 2, 3, b);
        let mut r = rng(seed);
        let p = random_layer(&cfg, &mut r);
        let x = randn(6, 8, 1.0, &mut r);
        let (z, w) = ttt_forward_primal(&cfg, &p, &x).unwrap();
        let mut state = TttState::new(&p.core);
        for t in 0..8 {
            let zt = state.step(&cfg, &p, &x.column(t)).unwrap();
            let zc = z.column(t);
            prop_assert_eq!(zt.data(), zc.data());
            prop_assert!(state.pos() < b);
        }
        prop_assert_eq!(state.weights(), &w[..]);
        prop_assert_eq!(state.anchor(), &w[..]);
    }
}

#[test]
fn causality_both_forms() {
    for model in models() {
        for form in [Form::Primal, Form::Dual] {
            let cfg = TttConfig::new(model, 2, 4, 4);
            let mut r = rng(21);
            let p = random_layer(&cfg, &mut r);
            let x = randn(8, 16, 1.0, &mut r);
            let z = multihead_forward(&cfg, &p, &x, form).unwrap();
            for s in [0, 3, 5, 12, 15] {
                let mut xp = x.clone();
                for i in 0..8 {
                    xp.set(i, s, x.at(i, s) + r.random_range(-2.0..2.0));
                }
                let zp = multihead_forward(&cfg, &p, &xp, form).unwrap();
                assert_eq!(zp.slice_cols(0, s).data(), z.slice_cols(0, s).data(), "{model:?} {form:?} s={s}");
                assert_ne!(zp.column(s).data(), z.column(s).data());
            }
        }
    }
}

#[test]
fn mini_batch_anchor_convention() {
    // Two identical tokens: online GD takes the second gradient at W₁, while
    // mini-batch GD with b=2 takes both at W₀ and so moves W twice as far.
    let mut cfg = TttConfig::new(InnerModel::linear().bare(), 1, 2, 2);
    cfg.eta = EtaMode::Fixed(0.25);
    let p = identity_layer(&cfg);
    let col = [1.0, 0.0];
    let x = Tensor::from_fn(2, 2, |i, _| col[i]);
    let (_, w) = ttt_forward_dual(&cfg, &p, &x).unwrap();
    // G at W₀=0 is −2 e₁e₁ᵀ, so two anchored steps give W = e₁e₁ᵀ.
    assert_eq!(w[0].layers[0].data(), &[1.0, 0.0, 0.0, 0.0]);
    let online = TttConfig { mini_batch: 1, ..cfg };
    let (_, wo) = ttt_forward_dual(&online, &p, &x).unwrap();
    // Online: 0.5, then 0.5 + 0.5·(1 − 0.5) = 0.75.
    assert_eq!(wo[0].layers[0].data(), &[0.75, 0.0, 0.0, 0.0]);
}

#[test]
fn zero_init_single_batch_dual_closed_form() {
    let eta = 0.3;
    let mut cfg = TttConfig::new(InnerModel::linear().bare(), 1, 5, 12);
    cfg.eta = EtaMode::Fixed(eta);
    let p = identity_layer(&cfg);
    let x = randn(5, 12, 1.0, &mut rng(4));
    let (z, _) = ttt_forward_dual(&cfg, &p, &x).unwrap();
    let expected = x.matmul(&causal_mask(&x.matmul_tn(&x).unwrap()).unwrap()).unwrap().scale(2.0 * eta);
    assert!(z.rel_diff(&expected) <= 1e-13);
}

#[test]
fn multihead_equals_sliced_single_heads() {
    for model in [InnerModel::linear(), InnerModel::mlp()] {
        let cfg = TttConfig::new(model, 4, 4, 4);
        let mut r = rng(31);
        let p = random_layer(&cfg, &mut r);
        let x = randn(16, 8, 1.0, &mut r);
        let z = multihead_forward(&cfg, &p, &x, Form::Dual).unwrap();
        let single = TttConfig { heads: 1, ..cfg };
        for h in 0..4 {
            // a one-head layer reading the full input with head h's projections
            let ph = TttLayerParams {
                theta_k: p.theta_k.slice_rows(h * 4, 4),
                theta_q: p.theta_q.slice_rows(h * 4, 4),
                theta_v: p.theta_v.slice_rows(h * 4, 4),
                core: TttCore {
                    theta_lr: p.core.theta_lr.slice_rows(h, 1),
                    init: vec![p.core.init[h].clone()],
                    ln_gamma: p.core.ln_gamma.slice_rows(h * 4, 4),
                    ln_beta: p.core.ln_beta.slice_rows(h * 4, 4),
                },
            };
            let mut g = Eager;
            let out = ttt_layer(&mut g, &single, &ph, &x, 8, Form::Primal);
            assert!(out.z.rel_diff(&z.slice_rows(h * 4, 4)) <= 1e-12);
        }
        // H=1 agrees with the single-sequence API
        let one = TttConfig::new(model, 1, 16, 4);
        let p1 = random_layer(&one, &mut r);
        let (zd, _) = ttt_forward_dual(&one, &p1, &x).unwrap();
        assert_eq!(multihead_forward(&one, &p1, &x, Form::Dual).unwrap(), zd);
    }
}

#[test]
fn zero_projection_head_passes_test_view_through() {
    for model in [InnerModel::linear(), InnerModel::linear().bare()] {
        let cfg = TttConfig::new(model, 2, 3, 2);
        let mut r = rng(41);
        let mut p = random_layer(&cfg, &mut r);
        for th in [&mut p.theta_k, &mut p.theta_v] {
            for i in 0..3 {
                for j in 0..6 {
                    th.set(i, j, 0.0);
                }
            }
        }
        p.core.init[0].layers[0] = Tensor::zeros(&[3, 3]);
        let x = randn(6, 4, 1.0, &mut r);
        let z = multihead_forward(&cfg, &p, &x, Form::Dual).unwrap().slice_rows(0, 3);
        let q = p.theta_q.matmul(&x).unwrap().slice_rows(0, 3);
        if model.bare {
            assert_eq!(z.max_abs(), 0.0);
        } else {
            // LN of an all-zero residual collapses to beta
            let beta = p.core.ln_beta.slice_rows(0, 3);
            let expected = Tensor::from_fn(3, 4, |i, j| q.at(i, j) + beta.at(i, 0));
            assert!(z.max_abs_diff(&expected) <= 1e-15);
        }
    }
}

#[test]
fn ragged_sequence_is_rejected() {
    let cfg = TttConfig::new(InnerModel::linear(), 1, 4, 3);
    let p = random_layer(&cfg, &mut rng(0));
    let err = ttt_forward_dual(&cfg, &p, &Tensor::zeros(&[4, 8])).unwrap_err();
    assert!(err.to_string().contains("multiple"), "{err}");
    assert!(ttt_forward_primal(&cfg, &p, &Tensor::zeros(&[5, 6])).is_err());
}

// ---- outer-loop gradients through the inner loop ----

fn flatten(p: &TttLayerParams<Tensor>) -> Vec<Tensor> {
    let mut v = vec![
        p.theta_k.clone(),
        p.theta_q.clone(),
        p.theta_v.clone(),
        p.core.theta_lr.clone(),
        p.core.ln_gamma.clone(),
        p.core.ln_beta.clone(),
    ];
    for w in &p.core.init {
        v.extend(w.layers.iter().cloned());
    }
    v
}

fn unflatten<V: Clone>(cfg: &TttConfig, ids: &[V]) -> TttLayerParams<V> {
    let k = cfg.model.kind.layers();
    TttLayerParams {
        theta_k: ids[0].clone(),
        theta_q: ids[1].clone(),
        theta_v: ids[2].clone(),
        core: TttCore {
            theta_lr: ids[3].clone(),
            ln_gamma: ids[4].clone(),
            ln_beta: ids[5].clone(),
            init: ids[6..]
                .chunks(k)
                .map(|c| InnerWeights { layers: c.to_vec() })
                .collect(),
        },
    }
}

fn outer_loss<G: Graph<f64>>(g: &mut G, cfg: &TttConfig, ids: &[G::V], x: &Tensor, target: &Tensor, form: Form) -> G::V {
    let p = unflatten(cfg, ids);
    let xv = g.constant(x.clone());
    let out = ttt_layer(g, cfg, &p, &xv, x.cols(), form);
    let tg = g.constant(target.clone());
    let diff = g.sub(&out.z, &tg);
    let sq = g.mul(&diff, &diff);
    let l = g.sum_all(&sq);
    g.scale(&l, 1.0 / x.cols() as f64)
}

fn grad_setup(kind: InnerKind, seed: u64) -> (TttConfig, Vec<Tensor>, Tensor, Tensor) {
    let cfg = TttConfig::new(InnerModel::new(kind, false), 1, 8, 4);
    let mut r = rng(seed);
    let p = random_layer(&cfg, &mut r);
    let x = randn(8, 32, 1.0, &mut r);
    let target = randn(8, 32, 1.0, &mut r);
    (cfg, flatten(&p), x, target)
}

#[test]
fn taped_forward_equals_eager_bitwise() {
    for kind in [InnerKind::Linear, InnerKind::Mlp] {
        for ckpt in [false, true] {
            let (mut cfg, params, x, _) = grad_setup(kind, 50);
            cfg.checkpoint = ckpt;
            let p = unflatten(&cfg, &params);
            let eager = ttt_layer(&mut Eager, &cfg, &p, &x, 32, Form::Dual);
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
            let pt = unflatten(&cfg, &ids);
            let xv = tape.constant(x.clone());
            let out = ttt_layer(&mut tape, &cfg, &pt, &xv, 32, Form::Dual);
            assert_eq!(tape.value(&out.z), &eager.z);
        }
    }
}

#[test]
fn outer_gradients_match_finite_differences() {
    for kind in [InnerKind::Linear, InnerKind::Mlp] {
        let (cfg, params, x, target) = grad_setup(kind, 60);
        let report = grad_check(&params, 1e-5, |tape, ids| outer_loss(tape, &cfg, ids, &x, &target, Form::Dual));
        assert!(report.max_rel_err <= 1e-5, "{kind:?}: {report:?}");
    }
}

#[test]
fn checkpointed_and_primal_gradients_match_stored_dual() {
    for kind in [InnerKind::Linear, InnerKind::Mlp] {
        let (cfg, params, x, target) = grad_setup(kind, 70);
        let grads = |cfg: &TttConfig, form: Form| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
            let loss = outer_loss(&mut tape, cfg, &ids, &x, &target, form);
            let gm = tape.backward(loss).unwrap();
            ids.iter().map(|&i| gm.get(i).unwrap().clone()).collect::<Vec<_>>()
        };
        let full = grads(&cfg, Form::Dual);
        let ck = grads(&TttConfig { checkpoint: true, ..cfg }, Form::Dual);
        let primal = grads(&cfg, Form::Primal);
        for ((a, b), c) in full.iter().zip(&ck).zip(&primal) {
            assert!(b.max_abs_diff(a) <= 1e-12 * a.max_abs().max(1.0), "{kind:?}");
            assert!(c.rel_diff(a) <= 1e-9, "{kind:?}");
        }
    }
}
