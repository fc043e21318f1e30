use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::config::OptimizerConfig;

/// Adaptive-moment state, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f64> {
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// Per-tensor treatment in [`optimizer_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRule {
    pub decay: bool,
    pub frozen: bool,
}

/// One decoupled-weight-decay Adam update with global-norm clipping.
/// Frozen tensors are left untouched and do not count toward the norm.
/// Returns the gradient norm before clipping.
pub fn optimizer_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    rules: &[ParamRule],
    state: &mut AdamState<T>,
    lr: f64,
    opt: &OptimizerConfig,
) -> Result<f64> {
    let n = params.len();
    if grads.len() != n || names.len() != n || rules.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Config(format!(
            "optimizer inputs disagree in length: {n} params, {} grads, {} names, {} rules, {} moments",
            grads.len(),
            names.len(),
            rules.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0;
    for i in 0..n {
        if params[i].shape() != grads[i].shape() {
            return Err(Error::TensorShape {
                name: names[i].clone(),
                expected: params[i].shape().to_vec(),
                found: grads[i].shape().to_vec(),
            });
        }
        if !grads[i].is_finite() {
            return Err(Error::NonFiniteGradient(names[i].clone()));
        }
        if !rules[i].frozen {
            sq += grads[i].sum_sq().f64();
        }
    }
    let norm = sq.sqrt();
    let clip = if opt.grad_clip > 0.0 && norm > opt.grad_clip { opt.grad_clip / norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2) = (T::c(opt.beta1), T::c(opt.beta2));
    let (one, eps) = (T::one(), T::c(opt.eps));
    let clip = T::c(clip);
    let step_size = T::c(lr / bc1);
    let inv_bc2 = T::c(1.0 / bc2);

    for i in 0..n {
        if rules[i].frozen {
            continue;
        }
        let decay = if rules[i].decay { T::c(1.0 - lr * opt.weight_decay) } else { one };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            let gj = g[j] * clip;
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            p[j] = p[j] * decay - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(norm)
}

/// Linear warmup from 0 to `peak`, then cosine decay to `end` at `total`.
/// `step` counts completed updates; the rate for update `k` (1-based) is
/// `lr_schedule(k, ..)`.
pub fn lr_schedule(step: usize, total: usize, peak: f64, end: f64, warmup_frac: f64) -> f64 {
    let warm = warmup_steps(total, warmup_frac);
    let step = step.min(total);
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    let span = total - warm;
    if span == 0 {
        return peak;
    }
    let progress = (step - warm) as f64 / span as f64;
    end + 0.5 * (peak - end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `⌈total · frac⌉`, at least 1 when `total > 0`.
pub fn warmup_steps(total: usize, frac: f64) -> usize {
    if total == 0 {
        return 0;
    }
    ((total as f64 * frac).ceil() as usize).clamp(1, total)
}
