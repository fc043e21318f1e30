use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttt_core::attention::{
    linear_attention, nadaraya_watson, nadaraya_watson_scaled, softmax_attention, linear_attention_gap,
    linear_attention_gap_with_b, AttnParams, NadarayaWatson,
};
use ttt_core::tensor::{randn, softmax_cols};
use ttt_core::Tensor;

fn instance(seed: u64, d: usize, hd: usize, t: usize) -> (Tensor, AttnParams) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (d as f64).sqrt();
    let p = AttnParams::new(randn(hd, d, std, &mut r), randn(hd, d, std, &mut r), randn(hd, d, std, &mut r)).unwrap();
    (randn(d, t, 1.0, &mut r), p)
}

fn sizes(seed: u64) -> (usize, usize, usize) {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = r.random_range(1..=16);
    let hd = r.random_range(1..=16);
    let t = r.random_range(1..=64);
    (d, hd, t)
}

#[test]
fn linear_attention_over_100_instances() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (d, hd, t) = sizes(seed);
        let (x, p) = instance(seed, d, hd, t);
        worst = worst.max(linear_attention_gap(&x, &p).unwrap());
    }
    assert!(worst <= 1e-12, "worst {worst:e}");
}

#[test]
fn linear_attention_needs_batch_gd() {
    let (x, p) = instance(1, 8, 8, 32);
    let diff = linear_attention_gap_with_b(&x, &p, 16).unwrap();
    assert!(diff > 1e-6, "b=16 diff {diff:e}");
}

#[test]
fn nadaraya_watson_over_100_instances() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (d, hd, t) = sizes(seed + 1000);
        let (x, p) = instance(seed + 1000, d, hd, t);
        let nw = nadaraya_watson(&x, &p).unwrap();
        let sm = softmax_attention(&x, &p).unwrap();
        worst = worst.max(nw.max_abs_diff(&sm));
    }
    assert!(worst <= 1e-12, "worst {worst:e}");
}

#[test]
fn recurrent_linear_attention_equals_double_sum() {
    let (x, p) = instance(5, 8, 8, 16);
    let z = linear_attention(&x, &p).unwrap();
    let k = p.theta_k.matmul(&x).unwrap();
    let q = p.theta_q.matmul(&x).unwrap();
    let v = p.theta_v.matmul(&x).unwrap();
    for t in 0..16 {
        for i in 0..8 {
            let mut acc = 0.0;
            for s in 0..=t {
                let kq: f64 = (0..8).map(|j| k.at(j, s) * q.at(j, t)).sum();
                acc += v.at(i, s) * kq;
            }
            assert!((z.at(i, t) - acc).abs() <= 1e-12 * acc.abs().max(1.0));
        }
    }
}

#[test]
fn softmax_attention_equals_masked_matrix_form() {
    let (x, p) = instance(6, 6, 4, 20);
    let k = p.theta_k.matmul(&x).unwrap();
    let q = p.theta_q.matmul(&x).unwrap();
    let v = p.theta_v.matmul(&x).unwrap();
    let mut scores = k.matmul_tn(&q).unwrap();
    for s in 0..20 {
        for t in 0..s {
            scores.set(s, t, f64::NEG_INFINITY);
        }
    }
    let expected = v.matmul(&softmax_cols(&scores)).unwrap();
    assert!(softmax_attention(&x, &p).unwrap().max_abs_diff(&expected) <= 1e-13);
}

#[test]
fn oracles_are_causal() {
    let (x, p) = instance(8, 5, 5, 12);
    let fs: [fn(&Tensor, &AttnParams) -> ttt_core::Result<Tensor>; 3] =
        [linear_attention, softmax_attention, nadaraya_watson];
    for f in fs {
        let z = f(&x, &p).unwrap();
        for s in [0, 4, 11] {
            let mut xp = x.clone();
            for i in 0..5 {
                xp.set(i, s, 3.0 - x.at(i, s));
            }
            let zp = f(&xp, &p).unwrap();
            assert_eq!(zp.slice_cols(0, s).data(), z.slice_cols(0, s).data());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nw_weights_are_a_distribution(seed in any::<u64>(), n in 1usize..20) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut est = NadarayaWatson::new(1.0);
        for _ in 0..n {
            est.observe(randn(4, 1, 2.0, &mut r), randn(3, 1, 1.0, &mut r));
        }
        let w = est.weights(&randn(4, 1, 2.0, &mut r)).unwrap();
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn nw_ignores_kernel_constant(seed in any::<u64>()) {
        let (x, p) = instance(seed, 6, 3, 10);
        let a = nadaraya_watson(&x, &p).unwrap();
        let b = nadaraya_watson_scaled(&x, &p, 2.0).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-15);
    }
}
