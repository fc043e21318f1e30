//! Outer-loop training of the byte-level language model.
//!
//! A run writes three files to `out_dir`:
//!
//! * `metrics.csv` with header
//!   `step,loss,lr,eta_base,grad_norm,val_loss,val_ppl`, one row per
//!   update. `loss` is the batch loss before the update, the `val_*`
//!   columns are empty except on evaluation steps. Every column is a
//!   deterministic function of the config and seed.
//! * `timing.csv` with header `step,ms`, wall-clock per update excluding
//!   evaluation.
//! * `summary.json`, a serialized [`TrainSummary`].
//!
//! plus `checkpoint.bin` (latest) and, when `checkpoint_interval > 0`,
//! `ckpt-<step>.bin` snapshots.

mod checkpoint;
mod config;
mod data;
mod eval;
mod optim;

pub use checkpoint::{checkpoint_precision, Checkpoint, MAGIC, VERSION};
pub use config::{DataConfig, OptimizerConfig, Precision, ScheduleConfig, TrainConfig};
pub use data::{epoch_order, load_corpus, split_corpus, synthetic_corpus, Corpus};
pub use eval::{evaluate, EvalReport};
pub use optim::{lr_schedule, optimizer_step, warmup_steps, AdamState, ParamRule};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::backbone::{decays, lm_forward, next_token_loss, ModelConfig, ModelParams, SeqLayerKind};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const METRICS_HEADER: &str = "step,loss,lr,eta_base,grad_norm,val_loss,val_ppl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub param_count: usize,
    pub precision: Precision,
    pub train_sequences: usize,
    pub val_sequences: usize,
    /// Batch loss of the last update, `None` for a zero-step run.
    pub final_train_loss: Option<f64>,
    pub val: EvalReport,
    pub wall_seconds: f64,
    pub out_dir: PathBuf,
}

/// Training corpus named by the config, or the generated one.
pub fn corpus_for(cfg: &TrainConfig) -> Result<Corpus> {
    let t = cfg.model.seq_len;
    match &cfg.data.path {
        Some(p) => load_corpus(p, t, cfg.data.split_frac),
        None => split_corpus(&synthetic_corpus(cfg.data.synthetic_bytes, 0), t, cfg.data.split_frac),
    }
}

/// Runs training at the configured precision (`TTT_PRECISION` wins).
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let corpus = corpus_for(cfg)?;
    match cfg.precision.with_env_override()? {
        Precision::F32 => train_on::<f32>(cfg, &corpus),
        Precision::F64 => train_on::<f64>(cfg, &corpus),
    }
}

/// `η_base` for update `step` (0-based), with the optional linear warmup
/// applied to TTT-MLP layers.
pub fn eta_base_at(cfg: &TrainConfig, step: usize) -> Option<f64> {
    let base = cfg.model.block.ttt()?.eta_base;
    if cfg.eta_warmup && cfg.model.block.seq_layer == SeqLayerKind::TttMlp {
        let warm = warmup_steps(cfg.steps, cfg.schedule.warmup_frac);
        Some(base * ((step + 1) as f64 / warm as f64).min(1.0))
    } else {
        Some(base)
    }
}

struct Batcher<'a> {
    seqs: &'a [Vec<u8>],
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    next: usize,
}

impl<'a> Batcher<'a> {
    fn new(seqs: &'a [Vec<u8>], seed: u64) -> Self {
        Self { seqs, seed, epoch: 0, order: epoch_order(seqs.len(), seed, 0), next: 0 }
    }

    fn batch(&mut self, n: usize) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(n * self.seqs[0].len());
        for _ in 0..n {
            if self.next == self.order.len() {
                self.epoch += 1;
                self.order = epoch_order(self.seqs.len(), self.seed, self.epoch);
                self.next = 0;
            }
            tokens.extend(self.seqs[self.order[self.next]].iter().map(|&b| b as usize));
            self.next += 1;
        }
        tokens
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Loss and parameter gradients of one batch.
pub fn loss_and_grads<T: Real>(
    cfg: &ModelConfig,
    params: &[Tensor<T>],
    template: &ModelParams<Tensor<T>>,
    tokens: &[usize],
    form: crate::ttt::Form,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut tape = Tape::<T>::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let p = template.zip_values(ids.clone())?;
    let logits = lm_forward(&mut tape, cfg, &p, tokens, cfg.seq_len, form);
    let loss = next_token_loss(&mut tape, &logits, tokens, cfg.seq_len);
    let value = tape.get(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = ids.iter().map(|&id| grads.take(id)).collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

pub fn train_on<T: Real>(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainSummary> {
    cfg.validate()?;
    if corpus.seq_len != cfg.model.seq_len {
        return Err(Error::Config(format!(
            "corpus sequences have length {}, model expects {}",
            corpus.seq_len, cfg.model.seq_len
        )));
    }
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = ModelParams::<Tensor<T>>::init(&cfg.model, &mut rng)?;
    let named = template.named();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let rules: Vec<ParamRule> = names
        .iter()
        .map(|n| ParamRule { decay: decays(n), frozen: cfg.frozen(n) })
        .collect();
    let mut flat: Vec<Tensor<T>> = named.into_iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(&flat);

    let val_seqs: &[Vec<u8>] = match cfg.eval_max_seqs {
        Some(n) => &corpus.val[..n.clamp(1, corpus.val.len())],
        None => &corpus.val,
    };
    let ckpt_path = cfg.out_dir.join("checkpoint.bin");
    let save = |flat: &[Tensor<T>], adam: &AdamState<T>, path: &std::path::Path| -> Result<()> {
        Checkpoint {
            config: cfg.clone(),
            step: adam.step,
            params: template.zip_values(flat.to_vec())?,
            adam: Some(adam.clone()),
        }
        .save(path)
    };
    save(&flat, &adam, &ckpt_path)?;

    let mut metrics = BufWriter::new(File::create(cfg.out_dir.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;
    let mut timing = BufWriter::new(File::create(cfg.out_dir.join("timing.csv"))?);
    writeln!(timing, "step,ms")?;

    let mut batcher = Batcher::new(&corpus.train, cfg.seed);
    let mut step_cfg = cfg.model.clone();
    let mut last_loss = None;
    let mut last_val = None;
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let lr = lr_schedule(step + 1, cfg.steps, cfg.schedule.peak_lr, cfg.schedule.end_lr, cfg.schedule.warmup_frac);
        let eta = eta_base_at(cfg, step);
        step_cfg.block.eta_base = eta;
        let tokens = batcher.batch(cfg.batch_seqs());
        let (loss, grads) = loss_and_grads(&step_cfg, &flat, &template, &tokens, cfg.form)?;
        let loss = loss.f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        let norm = optimizer_step(&mut flat, &grads, &names, &rules, &mut adam, lr, &cfg.optimizer)?;
        if flat.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        last_loss = Some(loss);
        let ms = t0.elapsed().as_secs_f64() * 1e3;

        let done = step + 1;
        let eval_now = done == cfg.steps || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0);
        let val = if eval_now {
            let p = template.zip_values(flat.clone())?;
            let r = evaluate(&step_cfg, &p, val_seqs, cfg.form)?;
            let out = (r.loss, r.ppl);
            last_val = Some(r);
            Some(out)
        } else {
            None
        };
        writeln!(
            metrics,
            "{done},{loss},{lr},{},{norm},{},{}",
            fmt_opt(eta),
            fmt_opt(val.map(|v| v.0)),
            fmt_opt(val.map(|v| v.1))
        )?;
        metrics.flush()?;
        writeln!(timing, "{done},{ms:.3}")?;

        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 {
            save(&flat, &adam, &cfg.out_dir.join(format!("ckpt-{done:06}.bin")))?;
        }
        if done == cfg.steps || (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0) {
            save(&flat, &adam, &ckpt_path)?;
        }
    }
    timing.flush()?;

    let val = match last_val {
        Some(v) => v,
        None => evaluate(&cfg.model, &template.zip_values(flat.clone())?, val_seqs, cfg.form)?,
    };
    let summary = TrainSummary {
        steps: cfg.steps,
        param_count: template.count(),
        precision: if std::mem::size_of::<T>() == 4 { Precision::F32 } else { Precision::F64 },
        train_sequences: corpus.train.len(),
        val_sequences: val_seqs.len(),
        final_train_loss: last_loss,
        val,
        wall_seconds: started.elapsed().as_secs_f64(),
        out_dir: cfg.out_dir.clone(),
    };
    std::fs::write(cfg.out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
