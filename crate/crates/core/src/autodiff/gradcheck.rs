use super::{NodeId, Tape};
use crate::tensor::Tensor;

/// Worst disagreement between tape gradients and central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over entries of `|tape − fd| / max(|tape|, |fd|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `1e-4 · max(1, max |tape gradient|)`; keeps entries that are tiny
    /// relative to the gradient's overall scale from dominating on
    /// finite-difference round-off alone.
    pub floor: f64,
    pub entries: usize,
}

/// Compares the tape gradient of the scalar built by `f` against
/// fourth-order central differences with step `step` on every parameter
/// entry.
pub fn grad_check<F>(params: &[Tensor<f64>], step: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let eval = |ps: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &ids);
        tape.get(out).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &ids);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| grads.get(id).expect("param").clone())
        .collect();

    let scale = analytic
        .iter()
        .map(|g| g.max_abs())
        .fold(1.0f64, f64::max);
    let floor = 1e-4 * scale;

    let mut work = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    let mut entries = 0;
    for (p, grad) in analytic.iter().enumerate() {
        for k in 0..work[p].numel() {
            let orig = work[p].data()[k];
            let mut at = |offset: f64| {
                work[p].data_mut()[k] = orig + offset;
                eval(&work)
            };
            // five-point stencil, truncation error O(step⁴)
            let fd = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
            work[p].data_mut()[k] = orig;
            let a = grad.data()[k];
            let abs = (a - fd).abs();
            let denom = a.abs().max(fd.abs()).max(floor);
            max_abs_err = max_abs_err.max(abs);
            max_rel_err = max_rel_err.max(if abs == 0.0 { 0.0 } else { abs / denom });
            entries += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        max_abs_err,
        floor,
        entries,
    }
}
