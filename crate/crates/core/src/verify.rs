//! Self-checks of the numerical core, runnable from the command line.
//!
//! Every check compares an implementation against an independent oracle
//! and reports the worst error it saw next to the tolerance it must meet.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{linear_attention, nadaraya_watson, softmax_attention, ttt_linear_bare_with, AttnParams};
use crate::autodiff::{grad_check, Graph, NodeId, Tape};
use crate::backbone::{lm_logits, BackboneKind, ModelConfig, ModelParams, SeqLayerKind};
use crate::error::Result;
use crate::tensor::{randn, Tensor};
use crate::train::{Checkpoint, TrainConfig};
use crate::ttt::{
    inner_loss, ttt_forward_dual, ttt_forward_primal, ttt_layer, Form, InitScheme, InnerKind, InnerModel,
    InnerWeights, TttConfig, TttCore, TttLayerParams, TttState, Views,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Fewer random instances per check.
    pub quick: bool,
    /// Mutation probe: run the linear-attention check with the inner gradient's
    /// sign flipped. The check is expected to fail.
    pub flip_inner_grad_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst error observed; its meaning is check-specific.
    pub max_err: f64,
    pub tolerance: f64,
    pub cases: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn result(name: &str, max_err: f64, tolerance: f64, cases: usize) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: max_err <= tolerance,
        max_err,
        tolerance,
        cases,
        detail: None,
    }
}

fn failed(name: &str, tolerance: f64, err: crate::Error) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: false,
        max_err: f64::INFINITY,
        tolerance,
        cases: 0,
        detail: Some(err.to_string()),
    }
}

pub fn verify(opts: VerifyOptions) -> VerifyReport {
    let n = if opts.quick { 20 } else { 100 };
    let seeds = if opts.quick { 3 } else { 20 };
    let model = if opts.flip_inner_grad_sign {
        InnerModel::linear().bare().with_flipped_gradient_sign()
    } else {
        InnerModel::linear().bare()
    };
    let checks: Vec<(&str, f64, Box<dyn Fn() -> Result<(f64, usize)>>)> = vec![
        ("linear_attention_equivalence", 1e-12, Box::new(move || linear_attention_oracle(n, model))),
        ("nadaraya_watson_equivalence", 1e-12, Box::new(move || nadaraya_watson_oracle(n))),
        ("primal_dual_equivalence", 1e-10, Box::new(move || equivalence_grid(seeds))),
        ("outer_grad_check", 1e-5, Box::new(outer_grad_check)),
        ("inner_contraction", 0.0, Box::new(move || contraction(if opts.quick { 10 } else { 50 }))),
        ("inner_exact_step", 1e-20, Box::new(move || exact_step(if opts.quick { 10 } else { 50 }))),
        ("causality", 0.0, Box::new(causality)),
        ("checkpoint_roundtrip", 0.0, Box::new(checkpoint_roundtrip)),
    ];
    let checks: Vec<CheckResult> = checks
        .into_iter()
        .map(|(name, tol, f)| match f() {
            Ok((err, cases)) => result(name, err, tol, cases),
            Err(e) => failed(name, tol, e),
        })
        .collect();
    VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random projections and inputs with `d, hd ≤ 16`, `T ≤ 64`.
pub fn attention_instance(seed: u64) -> (Tensor, AttnParams) {
    let mut r = rng(seed);
    let d = r.random_range(1..=16);
    let hd = r.random_range(1..=16);
    let t = r.random_range(1..=64);
    let std = 1.0 / (d as f64).sqrt();
    let p = AttnParams::new(randn(hd, d, std, &mut r), randn(hd, d, std, &mut r), randn(hd, d, std, &mut r))
        .expect("consistent shapes");
    (randn(d, t, 1.0, &mut r), p)
}

/// Worst `max |Z_ttt − Z_linattn|` over `n` instances.
pub fn linear_attention_oracle(n: usize, model: InnerModel) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    for seed in 0..n as u64 {
        let (x, p) = attention_instance(seed);
        let z = ttt_linear_bare_with(&x, &p, x.cols(), model)?;
        worst = worst.max(z.max_abs_diff(&linear_attention(&x, &p)?));
    }
    Ok((worst, n))
}

/// Worst `max |Z_nw − Z_softmax|` over `n` instances.
pub fn nadaraya_watson_oracle(n: usize) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    for seed in 0..n as u64 {
        let (x, p) = attention_instance(seed + 10_000);
        worst = worst.max(nadaraya_watson(&x, &p)?.max_abs_diff(&softmax_attention(&x, &p)?));
    }
    Ok((worst, n))
}

/// Random layer with a non-trivial gate, LN affine and `θ_init`.
pub fn random_layer(cfg: &TttConfig, r: &mut ChaCha8Rng) -> TttLayerParams<Tensor> {
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

/// {Linear, MLP} × {bare, LN+residual} × b ∈ {1, 4, T}, `seeds` each.
/// Returns the worst relative difference of `Z` and final `W`.
pub fn equivalence_grid(seeds: usize) -> Result<(f64, usize)> {
    let (d, t) = (8, 32);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for kind in [InnerKind::Linear, InnerKind::Mlp] {
        for bare in [true, false] {
            for b in [1, 4, t] {
                for seed in 0..seeds as u64 {
                    let cfg = TttConfig::new(InnerModel::new(kind, bare), 1, d, b);
                    let mut r = rng(seed * 1000 + cases as u64);
                    let p = random_layer(&cfg, &mut r);
                    let x = randn(d, t, 1.0, &mut r);
                    let (zp, wp) = ttt_forward_primal(&cfg, &p, &x)?;
                    let (zd, wd) = ttt_forward_dual(&cfg, &p, &x)?;
                    worst = worst.max(zd.rel_diff(&zp)).max(wd[0].rel_diff(&wp[0]));
                    cases += 1;
                }
            }
        }
    }
    Ok((worst, cases))
}

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
    TttLayerParams {
        theta_k: ids[0].clone(),
        theta_q: ids[1].clone(),
        theta_v: ids[2].clone(),
        core: TttCore {
            theta_lr: ids[3].clone(),
            ln_gamma: ids[4].clone(),
            ln_beta: ids[5].clone(),
            init: ids[6..]
                .chunks(cfg.model.kind.layers())
                .map(|c| InnerWeights { layers: c.to_vec() })
                .collect(),
        },
    }
}

/// Mean squared error of the layer output against a fixed target.
pub fn outer_loss(tape: &mut Tape<f64>, cfg: &TttConfig, ids: &[NodeId], x: &Tensor, target: &Tensor) -> NodeId {
    let p = unflatten(cfg, ids);
    let xv = tape.constant(x.clone());
    let out = ttt_layer(tape, cfg, &p, &xv, x.cols(), Form::Dual);
    let tg = tape.constant(target.clone());
    let diff = tape.sub(&out.z, &tg);
    let sq = tape.mul(&diff, &diff);
    let l = tape.sum_all(&sq);
    tape.scale(&l, 1.0 / x.cols() as f64)
}

/// Tape gradients of the full outer loss against central differences, for
/// TTT-Linear and TTT-MLP at `d = 8, T = 32, b = 4`.
pub fn outer_grad_check() -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (i, kind) in [InnerKind::Linear, InnerKind::Mlp].into_iter().enumerate() {
        let cfg = TttConfig::new(InnerModel::new(kind, false), 1, 8, 4);
        let mut r = rng(60 + i as u64);
        let p = random_layer(&cfg, &mut r);
        let x = randn(8, 32, 1.0, &mut r);
        let target = randn(8, 32, 1.0, &mut r);
        let report = grad_check(&flatten(&p), 1e-5, |tape, ids| outer_loss(tape, &cfg, ids, &x, &target));
        worst = worst.max(report.max_rel_err);
        entries += report.entries;
    }
    Ok((worst, entries))
}

/// Runs bare TTT-Linear one token at a time with `η_t = frac / ‖x̂_t‖²` and
/// hands each `(before, after)` inner-loss pair to `check`.
fn stepwise(seqs: usize, frac: f64, mut check: impl FnMut(f64, f64)) -> Result<usize> {
    let (d, t) = (6, 32);
    let cfg = TttConfig::new(InnerModel::linear().bare(), 1, d, 1);
    let mut steps = 0;
    for seed in 0..seqs as u64 {
        let mut r = rng(500 + seed);
        let mut p = random_layer(&cfg, &mut r);
        p.core.init[0].layers[0] = randn(d, d, 0.5, &mut r);
        let mut state = TttState::new(&p.core);
        for _ in 0..t {
            let x = randn(d, 1, 1.0, &mut r);
            let xv = x.reshape(&[d])?;
            let xk = p.theta_k.matmul(&x)?;
            let before = inner_loss(&cfg, &p, state.weights(), &xv)?;
            let views = Views {
                train: xk.clone(),
                label: p.theta_v.matmul(&x)?,
                test: p.theta_q.matmul(&x)?,
            };
            state.step_views(&cfg, &p.core, &views, &Tensor::full(&[1, 1], frac / xk.sum_sq()));
            check(before, inner_loss(&cfg, &p, state.weights(), &xv)?);
            steps += 1;
        }
    }
    Ok(steps)
}

/// Count of steps that failed to reduce the loss for step sizes strictly
/// inside the contractive range. Zero is a pass.
pub fn contraction(seqs: usize) -> Result<(f64, usize)> {
    let mut violations = 0usize;
    let mut total = 0;
    for frac in [0.05, 0.3, 0.7, 0.95] {
        total += stepwise(seqs, frac, |before, after| {
            if !(after < before) {
                violations += 1;
            }
        })?;
    }
    Ok((violations as f64, total))
}

/// Largest post-step loss with `η_t = 1 / (2‖x̂_t‖²)`.
pub fn exact_step(seqs: usize) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let n = stepwise(seqs, 0.5, |_, after| worst = worst.max(after))?;
    Ok((worst, n))
}

fn small_model(backbone: BackboneKind, seq_layer: SeqLayerKind, bare: bool) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.vocab_size = 32;
    cfg.n_blocks = 2;
    cfg.seq_len = 16;
    cfg.block.backbone = backbone;
    cfg.block.seq_layer = seq_layer;
    cfg.block.embed_dim = 8;
    cfg.block.heads = 2;
    cfg.block.mini_batch = 4;
    cfg.block.inner_bare = bare;
    cfg
}

/// Randomizes every tensor, including the zero-initialized ones, so no
/// block is an identity map.
pub fn randomized_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor>> {
    let mut r = rng(seed);
    let p = ModelParams::<Tensor>::init(cfg, &mut r)?;
    Ok(p.map(|name, t| {
        let noise = randn(t.rows(), t.cols(), 0.3, &mut r);
        let noise = noise.reshape(t.shape()).expect("same numel");
        if name.contains("gamma") {
            t.add(&noise.scale(0.3)).expect("same shape")
        } else {
            t.add(&noise).expect("same shape")
        }
    }))
}

/// Number of logits at positions before a perturbed token that changed, for
/// every backbone, sequence layer, inner-model mode and form. Zero is a
/// pass; the comparison is bitwise.
pub fn causality() -> Result<(f64, usize)> {
    let mut changed = 0usize;
    let mut cases = 0;
    for backbone in [BackboneKind::Transformer, BackboneKind::Mamba] {
        for layer in [SeqLayerKind::TttLinear, SeqLayerKind::TttMlp, SeqLayerKind::SoftmaxAttention] {
            for bare in [false, true] {
                if bare && layer == SeqLayerKind::SoftmaxAttention {
                    continue;
                }
                let cfg = small_model(backbone, layer, bare);
                let p = randomized_params(&cfg, 7)?;
                let mut r = rng(8);
                let tokens: Vec<usize> = (0..cfg.seq_len).map(|_| r.random_range(0..cfg.vocab_size)).collect();
                for form in [Form::Primal, Form::Dual] {
                    let base = lm_logits(&cfg, &p, &tokens, cfg.seq_len, form)?;
                    for s in [1, 5, 8, cfg.seq_len - 1] {
                        let mut pert = tokens.clone();
                        pert[s] = (pert[s] + 1 + r.random_range(0..cfg.vocab_size - 1)) % cfg.vocab_size;
                        let out = lm_logits(&cfg, &p, &pert, cfg.seq_len, form)?;
                        for t in 0..s {
                            if base.column(t) != out.column(t) {
                                changed += 1;
                            }
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    // the attention oracles on their own
    for seed in 0..10u64 {
        let (x, p) = attention_instance(seed + 20_000);
        let t = x.cols();
        if t < 2 {
            continue;
        }
        let s = t / 2;
        let mut xp = x.clone();
        for i in 0..x.rows() {
            xp.set(i, s, x.at(i, s) + 1.0);
        }
        type Layer = fn(&Tensor, &AttnParams) -> Result<Tensor>;
        let layers: [Layer; 3] = [linear_attention, softmax_attention, nadaraya_watson];
        for f in layers {
            let (a, b) = (f(&x, &p)?, f(&xp, &p)?);
            for col in 0..s {
                if a.column(col) != b.column(col) {
                    changed += 1;
                }
            }
            cases += 1;
        }
    }
    Ok((changed as f64, cases))
}

/// Number of failures among: bit-exact save/load/save, and rejection of a
/// corrupted magic, version, config, payload and truncated file.
pub fn checkpoint_roundtrip() -> Result<(f64, usize)> {
    let mut config = TrainConfig::default();
    config.model = small_model(BackboneKind::Mamba, SeqLayerKind::TttMlp, false);
    let params = randomized_params(&config.model, 3)?;
    let flat: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut adam = crate::train::AdamState::new(&flat);
    adam.step = 11;
    adam.m = flat.iter().map(|t| t.scale(0.1)).collect();
    adam.v = flat.iter().map(|t| t.map(|x| x * x)).collect();
    let ck = Checkpoint { config, step: 11, params, adam: Some(adam) };
    let bytes = ck.to_bytes();
    let mut failures = 0usize;
    match Checkpoint::<f64>::from_bytes(&bytes) {
        Ok(back) if back == ck && back.to_bytes() == bytes => {}
        _ => failures += 1,
    }
    let json_start = 8 + 4 + 1 + 8;
    let corruptions: [Box<dyn Fn(&mut Vec<u8>)>; 5] = [
        Box::new(|b| b[0] ^= 0xff),
        Box::new(|b| b[8] = b[8].wrapping_add(1)),
        Box::new(move |b| b[json_start + 2] ^= 0x01),
        Box::new(|b| {
            let i = b.len() - 100;
            b[i] ^= 0x10
        }),
        Box::new(|b| b.truncate(b.len() - 33)),
    ];
    for corrupt in &corruptions {
        let mut bad = bytes.clone();
        corrupt(&mut bad);
        if Checkpoint::<f64>::from_bytes(&bad).is_ok() {
            failures += 1;
        }
    }
    Ok((failures as f64, 1 + corruptions.len()))
}
