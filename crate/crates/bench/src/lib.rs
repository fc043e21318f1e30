//! Wall-clock comparison of the primal and dual TTT forms, and the
//! mini-batch size trade-off.
//!
//! `bench_forms` CSV schema, after `#`-prefixed header lines recording the
//! spec and the worker-thread count:
//!
//! ```text
//! form,b,median_ms,min_ms,max_ms,speedup
//! ```
//!
//! `speedup` is the primal median divided by the row's median, so it is 1
//! for primal rows. A trailing comment line holds the fitted dual-form cost
//! model `ms(b) ≈ c0 + c1/b + c2·b` and its minimizing `b`.
//!
//! `sweep_b` CSV schema:
//!
//! ```text
//! b,seed,val_ppl,ms_per_step
//! ```

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use ttt_core::tensor::{randn, Real, Tensor};
use ttt_core::train::{train_on, Corpus, Precision, TrainConfig};
use ttt_core::ttt::{ttt_forward_dual, ttt_forward_primal, Form, InnerKind, InnerModel, TttConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench spec: {0}")]
    Spec(String),
    #[error("primal and dual outputs disagree at b={b}: rel diff {diff:e} > {tol:e}; refusing to time")]
    Equivalence { b: usize, diff: f64, tol: f64 },
    #[error(transparent)]
    Core(#[from] ttt_core::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// Head dimension; the layer has a single head.
    pub d: usize,
    pub seq_len: usize,
    pub mini_batches: Vec<usize>,
    pub kind: InnerKind,
    pub bare: bool,
    pub reps: usize,
    pub warmup: usize,
    pub precision: Precision,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            d: 64,
            seq_len: 512,
            mini_batches: vec![1, 4, 16, 64],
            kind: InnerKind::Linear,
            bare: false,
            reps: 5,
            warmup: 1,
            precision: Precision::F64,
            seed: 0,
            output: None,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(BenchError::Spec(format!("reps must be at least 3, got {}", self.reps)));
        }
        if self.d == 0 || self.seq_len == 0 || self.mini_batches.is_empty() {
            return Err(BenchError::Spec("d, seq_len and mini_batches must be non-empty".into()));
        }
        if let Some(&b) = self.mini_batches.iter().find(|&&b| b == 0 || self.seq_len % b != 0) {
            return Err(BenchError::Spec(format!("b={b} does not divide T={}", self.seq_len)));
        }
        Ok(())
    }

    /// Relative primal/dual disagreement allowed before timing.
    pub fn tolerance(&self) -> f64 {
        match self.precision {
            Precision::F64 => 1e-9,
            Precision::F32 => 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormRow {
    pub form: Form,
    pub b: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// `√(c1/c2)` when both are positive.
    pub best_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormsReport {
    pub spec: BenchSpec,
    pub threads: usize,
    pub rows: Vec<FormRow>,
    /// Worst primal/dual relative difference seen by the precondition.
    pub max_rel_diff: f64,
    pub fit: Option<CostFit>,
}

impl FormsReport {
    pub fn row(&self, form: Form, b: usize) -> Option<&FormRow> {
        self.rows.iter().find(|r| r.form == form && r.b == b)
    }

    pub fn to_csv(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "# d={} T={} kind={:?} bare={} reps={} warmup={} precision={:?} seed={}\n# threads={}\n",
            s.d, s.seq_len, s.kind, s.bare, s.reps, s.warmup, s.precision, s.seed, self.threads
        );
        out.push_str("form,b,median_ms,min_ms,max_ms,speedup\n");
        for r in &self.rows {
            let form = match r.form {
                Form::Primal => "primal",
                Form::Dual => "dual",
            };
            out.push_str(&format!("{form},{},{:.4},{:.4},{:.4},{:.3}\n", r.b, r.median_ms, r.min_ms, r.max_ms, r.speedup));
        }
        if let Some(f) = &self.fit {
            let best = f.best_b.map(|b| format!("{b:.2}")).unwrap_or_else(|| "none".into());
            out.push_str(&format!("# fit dual_ms(b) = {:.4} + {:.4}/b + {:.6}*b; best_b={best}\n", f.c0, f.c1, f.c2));
        }
        out
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_reps(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        out.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

/// Least-squares fit of `ms ≈ c0 + c1/b + c2·b`. Needs three distinct `b`.
pub fn fit_cost(points: &[(usize, f64)]) -> Option<CostFit> {
    let mut bs: Vec<usize> = points.iter().map(|p| p.0).collect();
    bs.sort_unstable();
    bs.dedup();
    if bs.len() < 3 {
        return None;
    }
    // normal equations AᵀA c = Aᵀy with rows [1, 1/b, b]
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for &(b, y) in points {
        let row = [1.0, 1.0 / b as f64, b as f64];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * y;
        }
    }
    let c = solve3(ata, aty)?;
    let best_b = (c[1] > 0.0 && c[2] > 0.0).then(|| (c[1] / c[2]).sqrt());
    Some(CostFit { c0: c[0], c1: c[1], c2: c[2], best_b })
}

fn solve3(mut a: [[f64; 3]; 3], mut y: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        y.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..3 {
                    a[r][k] -= f * a[col][k];
                }
                y[r] -= f * y[col];
            }
        }
    }
    Some([y[0] / a[0][0], y[1] / a[1][1], y[2] / a[2][2]])
}

pub fn bench_forms(spec: &BenchSpec) -> Result<FormsReport> {
    spec.validate()?;
    match spec.precision {
        Precision::F64 => bench_forms_typed::<f64>(spec),
        Precision::F32 => bench_forms_typed::<f32>(spec),
    }
}

fn bench_forms_typed<T: Real>(spec: &BenchSpec) -> Result<FormsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let model = InnerModel::new(spec.kind, spec.bare);
    let base = TttConfig::new(model, 1, spec.d, spec.mini_batches[0]);
    let params = ttt_core::verify::random_layer(&base, &mut rng).cast::<T>();
    let x: Tensor<T> = randn(spec.d, spec.seq_len, 1.0, &mut rng);

    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    let mut dual_points = Vec::new();
    for &b in &spec.mini_batches {
        let cfg = TttConfig::new(model, 1, spec.d, b);
        let (zp, wp) = ttt_forward_primal(&cfg, &params, &x)?;
        let (zd, wd) = ttt_forward_dual(&cfg, &params, &x)?;
        let diff = zd.rel_diff(&zp).f64().max(wd[0].rel_diff(&wp[0]).f64());
        if !(diff <= spec.tolerance()) {
            return Err(BenchError::Equivalence { b, diff, tol: spec.tolerance() });
        }
        worst = worst.max(diff);

        let primal = time_reps(spec.reps, spec.warmup, || {
            std::hint::black_box(ttt_forward_primal(&cfg, &params, &x)?);
            Ok(())
        })?;
        let dual = time_reps(spec.reps, spec.warmup, || {
            std::hint::black_box(ttt_forward_dual(&cfg, &params, &x)?);
            Ok(())
        })?;
        let pm = median(&primal);
        for (form, times) in [(Form::Primal, &primal), (Form::Dual, &dual)] {
            let m = median(times);
            rows.push(FormRow {
                form,
                b,
                median_ms: m,
                min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
                max_ms: times.iter().copied().fold(0.0, f64::max),
                speedup: pm / m,
            });
        }
        dual_points.extend(dual.iter().map(|&t| (b, t)));
    }
    Ok(FormsReport {
        spec: spec.clone(),
        // every kernel in this workspace runs on the calling thread
        threads: 1,
        rows,
        max_rel_diff: worst,
        fit: fit_cost(&dual_points),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub b: usize,
    pub seed: u64,
    pub val_ppl: f64,
    pub ms_per_step: f64,
}

/// Trains `base` once per `(b, seed)` and reports validation perplexity
/// and median wall-clock per update. Runs write under
/// `base.out_dir/b<b>-s<seed>`. A diverged run reports infinite perplexity.
pub fn sweep_b(base: &TrainConfig, corpus: &Corpus, bs: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &b in bs {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.block.mini_batch = b;
            cfg.seed = seed;
            cfg.out_dir = base.out_dir.join(format!("b{b}-s{seed}"));
            let run = match cfg.precision {
                Precision::F64 => train_on::<f64>(&cfg, corpus),
                Precision::F32 => train_on::<f32>(&cfg, corpus),
            };
            let val_ppl = match run {
                Ok(s) => s.val.ppl,
                Err(ttt_core::Error::NonFiniteLoss { .. }) | Err(ttt_core::Error::NonFiniteGradient(_)) => f64::INFINITY,
                Err(e) => return Err(e.into()),
            };
            rows.push(SweepRow { b, seed, val_ppl, ms_per_step: median_step_ms(&cfg.out_dir) });
        }
    }
    Ok(rows)
}

fn median_step_ms(dir: &std::path::Path) -> f64 {
    let Ok(text) = std::fs::read_to_string(dir.join("timing.csv")) else {
        return f64::NAN;
    };
    let ms: Vec<f64> = text.lines().skip(1).filter_map(|l| l.split(',').nth(1)?.parse().ok()).collect();
    if ms.is_empty() {
        f64::NAN
    } else {
        median(&ms)
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("b,seed,val_ppl,ms_per_step\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.3}\n", r.b, r.seed, r.val_ppl, r.ms_per_step));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_cost_model() {
        let pts: Vec<(usize, f64)> = [1, 2, 4, 8, 16, 64].iter().map(|&b| (b, 3.0 + 8.0 / b as f64 + 0.5 * b as f64)).collect();
        let f = fit_cost(&pts).unwrap();
        assert!((f.c0 - 3.0).abs() < 1e-9 && (f.c1 - 8.0).abs() < 1e-9 && (f.c2 - 0.5).abs() < 1e-9);
        assert!((f.best_b.unwrap() - 4.0).abs() < 1e-9);
        assert!(fit_cost(&pts[..2]).is_none());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn spec_validation() {
        assert!(BenchSpec::default().validate().is_ok());
        assert!(BenchSpec { reps: 2, ..Default::default() }.validate().is_err());
        assert!(BenchSpec { mini_batches: vec![3], seq_len: 16, ..Default::default() }.validate().is_err());
    }
}
