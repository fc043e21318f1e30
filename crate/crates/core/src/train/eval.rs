use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::column_nll;
use crate::autodiff::Eager;
use crate::backbone::{check_tokens, lm_forward, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::ttt::Form;

/// Validation metrics. Index `i` of the per-index vectors scores the
/// prediction of byte `i + 1` from bytes `0..=i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub ppl: f64,
    pub per_index_nll: Vec<f64>,
    pub per_index_ppl: Vec<f64>,
    pub sequences: usize,
}

/// Sequences scored per forward call.
const EVAL_BATCH: usize = 8;

pub fn evaluate<T: Real>(cfg: &ModelConfig, p: &ModelParams<Tensor<T>>, seqs: &[Vec<u8>], form: Form) -> Result<EvalReport> {
    p.validate(cfg)?;
    let t = match seqs.first() {
        Some(s) => s.len(),
        None => return Err(Error::Corpus("no validation sequences".into())),
    };
    if t < 2 || seqs.iter().any(|s| s.len() != t) {
        return Err(Error::Corpus("validation sequences must share a length of at least 2".into()));
    }
    let mut sums = vec![0.0; t - 1];
    for batch in seqs.chunks(EVAL_BATCH) {
        let tokens: Vec<usize> = batch.iter().flatten().map(|&b| b as usize).collect();
        check_tokens(cfg, &tokens, t)?;
        let logits = lm_forward(&mut Eager, cfg, p, &tokens, t, form);
        for s in 0..batch.len() {
            for (i, sum) in sums.iter_mut().enumerate() {
                let col = s * t + i;
                *sum += column_nll(&logits, col, tokens[col + 1]).f64();
            }
        }
    }
    let n = seqs.len() as f64;
    let per_index_nll: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let loss = per_index_nll.iter().sum::<f64>() / (t - 1) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    Ok(EvalReport {
        loss,
        ppl: loss.exp(),
        per_index_ppl: per_index_nll.iter().map(|l| l.exp()).collect(),
        per_index_nll,
        sequences: seqs.len(),
    })
}
