use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::ttt::Form;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub end_lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            end_lr: 1e-5,
            warmup_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Byte corpus; the contiguous tail is held out for validation.
    pub path: Option<PathBuf>,
    pub split_frac: f64,
    /// Size of the built-in generated corpus used when `path` is unset.
    pub synthetic_bytes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            split_frac: 0.9,
            synthetic_bytes: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// `TTT_PRECISION={f32,f64}` if set, else `self`.
    pub fn with_env_override(self) -> Result<Self> {
        match std::env::var("TTT_PRECISION") {
            Ok(v) => v.parse(),
            Err(std::env::VarError::NotPresent) => Ok(self),
            Err(e) => Err(Error::Config(format!("TTT_PRECISION: {e}"))),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}, expected f32 or f64"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub steps: usize,
    /// Defaults to `32 · seq_len`.
    pub tokens_per_batch: Option<usize>,
    pub seed: u64,
    pub data: DataConfig,
    /// Evaluate every this many steps (and after the last); 0 means only at
    /// the end.
    pub eval_interval: usize,
    /// Cap on validation sequences per evaluation.
    pub eval_max_seqs: Option<usize>,
    /// Checkpoint every this many steps (and after the last); 0 means only
    /// at the end.
    pub checkpoint_interval: usize,
    pub out_dir: PathBuf,
    /// Train the η gate; when off, `θ_lr` stays at zero so `η = η_base / 2`.
    pub learnable_eta: bool,
    /// Train `θ_init`; when off, it stays at its initial value.
    pub learnable_w0: bool,
    /// Linear warmup of `η_base` over the warmup fraction (TTT-MLP only).
    pub eta_warmup: bool,
    pub form: Form,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            steps: 200,
            tokens_per_batch: None,
            seed: 0,
            data: DataConfig::default(),
            eval_interval: 0,
            eval_max_seqs: None,
            checkpoint_interval: 0,
            out_dir: PathBuf::from("runs/default"),
            learnable_eta: true,
            learnable_w0: true,
            eta_warmup: true,
            form: Form::Dual,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn tokens_per_batch(&self) -> usize {
        self.tokens_per_batch.unwrap_or(32 * self.model.seq_len)
    }

    pub fn batch_seqs(&self) -> usize {
        self.tokens_per_batch() / self.model.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s = &self.schedule;
        if !(s.warmup_frac > 0.0 && s.warmup_frac < 1.0) {
            return Err(Error::Config(format!("warmup_frac must lie in (0, 1), got {}", s.warmup_frac)));
        }
        if !(s.peak_lr >= 0.0 && s.end_lr >= 0.0 && s.peak_lr.is_finite() && s.end_lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return Err(Error::Config("eps must be positive; weight_decay and grad_clip non-negative".into()));
        }
        let tpb = self.tokens_per_batch();
        if tpb == 0 || tpb % self.model.seq_len != 0 {
            return Err(Error::Config(format!(
                "tokens_per_batch {tpb} is not a positive multiple of seq_len {}",
                self.model.seq_len
            )));
        }
        if !(self.data.split_frac > 0.0 && self.data.split_frac < 1.0) {
            return Err(Error::Config("split_frac must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Whether the named parameter is held fixed.
    pub fn frozen(&self, name: &str) -> bool {
        (!self.learnable_eta && name.contains("theta_lr")) || (!self.learnable_w0 && name.contains("theta_init"))
    }
}
