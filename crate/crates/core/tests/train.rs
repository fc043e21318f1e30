use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttt_core::backbone::{lm_logits, ModelConfig, ModelParams, SeqLayerKind};
use ttt_core::tensor::Tensor;
use ttt_core::train::{
    evaluate, split_corpus, synthetic_corpus, train_on, Checkpoint, TrainConfig, METRICS_HEADER,
};
use ttt_core::ttt::Form;
use ttt_core::Error;

fn tiny(out: &std::path::Path) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.block.embed_dim = 8;
    c.model.block.heads = 2;
    c.model.block.mini_batch = 4;
    c.model.seq_len = 16;
    c.model.n_blocks = 1;
    c.tokens_per_batch = Some(4 * 16);
    c.steps = 6;
    c.eval_interval = 3;
    c.out_dir = out.to_path_buf();
    c
}

fn corpus(cfg: &TrainConfig) -> ttt_core::train::Corpus {
    split_corpus(&synthetic_corpus(4000, 9), cfg.model.seq_len, 0.9).unwrap()
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.steps = 0;
    let s = train_on::<f64>(&cfg, &corpus(&cfg)).unwrap();
    assert_eq!(s.final_train_loss, None);
    let ck = Checkpoint::<f64>::load(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(ck.step, 0);
    let init = ModelParams::<Tensor>::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(ck.params, init);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.trim(), METRICS_HEADER);
}

#[test]
fn identical_runs_give_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for kind in [SeqLayerKind::TttLinear, SeqLayerKind::TttMlp] {
        let mut ca = tiny(a.path());
        ca.model.block.seq_layer = kind;
        let mut cb = ca.clone();
        cb.out_dir = b.path().to_path_buf();
        train_on::<f64>(&ca, &corpus(&ca)).unwrap();
        train_on::<f64>(&cb, &corpus(&cb)).unwrap();
        let ma = std::fs::read(a.path().join("metrics.csv")).unwrap();
        let mb = std::fs::read(b.path().join("metrics.csv")).unwrap();
        assert_eq!(ma, mb);
        let text = String::from_utf8(ma).unwrap();
        let steps: Vec<usize> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, (1..=6).collect::<Vec<_>>());
        let mut other = ca.clone();
        other.seed = 1;
        train_on::<f64>(&other, &corpus(&other)).unwrap();
        assert_ne!(std::fs::read(a.path().join("metrics.csv")).unwrap(), mb);
    }
}

#[test]
fn initial_loss_is_log_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.steps = 1;
    let s = train_on::<f64>(&cfg, &corpus(&cfg)).unwrap();
    let l0 = s.final_train_loss.unwrap();
    let ln256 = 256f64.ln();
    assert!((l0 - ln256).abs() <= 0.05 * ln256, "{l0}");
}

#[test]
fn training_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.steps = 30;
    cfg.schedule.peak_lr = 1e-2;
    let s = train_on::<f64>(&cfg, &corpus(&cfg)).unwrap();
    assert!(s.val.loss < 256f64.ln() - 0.5, "{:?}", s.val);
}

#[test]
fn evaluation_matches_direct_nll() {
    let mut cfg = ModelConfig::default();
    cfg.block.embed_dim = 8;
    cfg.block.heads = 2;
    cfg.block.mini_batch = 4;
    cfg.seq_len = 8;
    cfg.n_blocks = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ModelParams::<Tensor>::init(&cfg, &mut rng).unwrap();
    p.head = Some(ttt_core::tensor::randn(256, 8, 0.5, &mut rng));
    let seq: Vec<u8> = b"the cat.".to_vec();
    let r = evaluate(&cfg, &p, &[seq.clone()], Form::Dual).unwrap();
    assert_eq!(r.per_index_nll.len(), 7);
    let toks: Vec<usize> = seq.iter().map(|&b| b as usize).collect();
    let logits = lm_logits(&cfg, &p, &toks, 8, Form::Dual).unwrap();
    for i in 0..7 {
        let col = logits.column(i);
        let m = col.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + col.data().iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let nll = lse - col.data()[toks[i + 1]];
        assert!((r.per_index_nll[i] - nll).abs() < 1e-12);
    }
    // zero head gives uniform predictions
    let p0 = ModelParams::<Tensor>::init(&cfg, &mut rng).unwrap();
    let r0 = evaluate(&cfg, &p0, &[seq], Form::Dual).unwrap();
    assert!((r0.ppl - 256.0).abs() < 1e-9);
}

#[test]
fn checkpoint_rejects_mismatched_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.steps = 0;
    train_on::<f64>(&cfg, &corpus(&cfg)).unwrap();
    let path = dir.path().join("checkpoint.bin");
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let mut wider = cfg.model.clone();
    wider.block.embed_dim = 12;
    wider.block.heads = 3;
    match Checkpoint::<f64>::load_for(&path, &wider) {
        Err(Error::TensorShape { name, .. }) => assert_eq!(name, "param/embed"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn diverging_run_reports_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.schedule.peak_lr = 1e300;
    cfg.optimizer.grad_clip = 0.0;
    cfg.steps = 4;
    match train_on::<f64>(&cfg, &corpus(&cfg)) {
        Err(Error::NonFiniteLoss { step }) => assert!((1..=4).contains(&step)),
        Err(Error::NonFiniteGradient(name)) => assert!(!name.is_empty()),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(dir.path().join("checkpoint.bin").exists());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(TrainConfig::from_json(r#"{"steps": 3}"#).is_ok());
    assert!(TrainConfig::from_json(r#"{"stepz": 3}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"schedule": {"warmup_frac": 1.0}}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"tokens_per_batch": 100}"#).is_err());
    let c = TrainConfig::default();
    assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
}
