use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttt_bench::{bench_forms, BenchError, BenchSpec};
use ttt_core::backbone::Decoder;
use ttt_core::tensor::Real;
use ttt_core::train::{checkpoint_precision, evaluate, load_corpus, train, Checkpoint, Precision, TrainConfig};
use ttt_core::ttt::Form;
use ttt_core::verify::{verify, VerifyOptions};

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "ttt", version, about = "Test-time-training sequence layers: train, evaluate, verify, benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a language model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out tail of a byte corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score every chunk of the file, not only the held-out tail.
        #[arg(long)]
        all: bool,
        #[arg(long, value_enum, default_value = "dual")]
        form: FormArg,
    },
    /// Run the equivalence, gradient, causality and checkpoint checks.
    Verify {
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        flip_inner_grad_sign: bool,
    },
    /// Time primal against dual form per a JSON bench spec.
    Bench {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Stream bytes from a checkpoint, one token at a time.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        n: usize,
        /// 0 picks the most likely byte.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FormArg {
    Primal,
    Dual,
}

impl From<FormArg> for Form {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Primal => Form::Primal,
            FormArg::Dual => Form::Dual,
        }
    }
}

/// A failed verification, reported after its output was printed.
#[derive(Debug)]
struct VerifyFailed;

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerifyFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use ttt_core::Error as E;
    for cause in err.chain() {
        if cause.is::<VerifyFailed>() {
            return EXIT_VERIFY;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite(_) | E::NonFiniteGradient(_) | E::NonFiniteLoss { .. } | E::Degenerate(_) => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            };
        }
        if let Some(e) = cause.downcast_ref::<BenchError>() {
            return match e {
                BenchError::Equivalence { .. } => EXIT_VERIFY,
                BenchError::Core(inner) if matches!(inner, E::NonFinite(_)) => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, out_dir } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = TrainConfig::from_json(&text)?;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let summary = train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Eval { ckpt, data, all, form } => match checkpoint_precision(&ckpt)? {
            Precision::F32 => eval_typed::<f32>(&ckpt, &data, all, form.into())?,
            Precision::F64 => eval_typed::<f64>(&ckpt, &data, all, form.into())?,
        },
        Cmd::Verify { quick, flip_inner_grad_sign } => {
            let report = verify(VerifyOptions { quick, flip_inner_grad_sign });
            println!("{}", report.to_json());
            if !report.passed {
                return Err(VerifyFailed.into());
            }
        }
        Cmd::Bench { spec } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: BenchSpec = serde_json::from_str(&text).map_err(|e| ttt_core::Error::Config(e.to_string()))?;
            let report = bench_forms(&spec)?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(path) = &spec.output {
                std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Cmd::Generate { ckpt, prompt, n, temperature, seed } => {
            if prompt.is_empty() {
                bail!(ttt_core::Error::Config("prompt must contain at least one byte".into()));
            }
            if !(temperature >= 0.0 && temperature.is_finite()) {
                bail!(ttt_core::Error::Config(format!("temperature must be finite and non-negative, got {temperature}")));
            }
            let bytes = match checkpoint_precision(&ckpt)? {
                Precision::F32 => generate::<f32>(&ckpt, prompt.as_bytes(), n, temperature, seed)?,
                Precision::F64 => generate::<f64>(&ckpt, prompt.as_bytes(), n, temperature, seed)?,
            };
            let mut out = std::io::stdout().lock();
            out.write_all(&bytes)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn eval_typed<T: Real>(ckpt: &Path, data: &Path, all: bool, form: Form) -> Result<()> {
    let ck = Checkpoint::<T>::load(ckpt)?;
    let model = &ck.config.model;
    let corpus = load_corpus(data, model.seq_len, ck.config.data.split_frac)?;
    let seqs: Vec<Vec<u8>> = if all { corpus.train.into_iter().chain(corpus.val).collect() } else { corpus.val };
    let report = evaluate(model, &ck.params, &seqs, form)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Prompt followed by `n` continuation bytes.
fn generate<T: Real>(ckpt: &Path, prompt: &[u8], n: usize, temperature: f64, seed: u64) -> Result<Vec<u8>> {
    let ck = Checkpoint::<T>::load(ckpt)?;
    let mut dec = Decoder::new(&ck.config.model, &ck.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = prompt.to_vec();
    let mut logits = None;
    for &b in prompt {
        logits = Some(dec.step(b as usize)?);
    }
    for _ in 0..n {
        let l = logits.take().expect("prompt is non-empty");
        let scores: Vec<f64> = l.data().iter().map(|x| x.f64()).collect();
        let next = if temperature == 0.0 {
            // first maximum, so ties resolve deterministically
            (0..scores.len()).fold(0, |best, i| if scores[i] > scores[best] { i } else { best })
        } else {
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
            let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
            let mut pick = w.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    pick = i;
                    break;
                }
                u -= wi;
            }
            pick
        };
        out.push(next as u8);
        logits = Some(dec.step(next)?);
    }
    Ok(out)
}
