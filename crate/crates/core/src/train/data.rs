use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Non-overlapping byte sequences of one context length.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seq_len: usize,
    pub train: Vec<Vec<u8>>,
    pub val: Vec<Vec<u8>>,
}

/// Cuts `bytes` into length-`seq_len` chunks; the first
/// `⌊chunks · split_frac⌋` are for training, the rest for validation.
pub fn split_corpus(bytes: &[u8], seq_len: usize, split_frac: f64) -> Result<Corpus> {
    if seq_len == 0 {
        return Err(Error::Corpus("sequence length must be positive".into()));
    }
    if bytes.len() < 2 * seq_len {
        return Err(Error::Corpus(format!(
            "corpus has {} bytes, need at least {} (two sequences)",
            bytes.len(),
            2 * seq_len
        )));
    }
    if !(split_frac > 0.0 && split_frac < 1.0) {
        return Err(Error::Corpus(format!("split fraction {split_frac} outside (0, 1)")));
    }
    let chunks: Vec<Vec<u8>> = bytes.chunks_exact(seq_len).map(<[u8]>::to_vec).collect();
    let n = chunks.len();
    let n_train = ((n as f64 * split_frac + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut train = chunks;
    let val = train.split_off(n_train);
    Ok(Corpus { seq_len, train, val })
}

pub fn load_corpus(path: &Path, seq_len: usize, split_frac: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Corpus(format!("{} is empty", path.display())));
    }
    split_corpus(&bytes, seq_len, split_frac)
}

/// Seeded permutation of training sequence indices for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    idx.shuffle(&mut rng);
    idx
}

/// Deterministic English-like text. Each document mixes words from a
/// shared Zipf lexicon with a handful of its own random names, so part of
/// every sequence is only predictable by recalling earlier context.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const LETTERS: &[u8] = b"etaoinshrdlcumwfgypbvkjxqz";
    let lexicon: Vec<Vec<u8>> = (0..3000)
        .map(|_| {
            let len = rng.random_range(2..9);
            // skewed letter frequencies
            (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    LETTERS[((u * u) * LETTERS.len() as f64) as usize]
                })
                .collect()
        })
        .collect();
    // Zipf-like sampling over the lexicon
    let zipf = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        ((lexicon.len() as f64).powf(u) as usize).saturating_sub(1).min(lexicon.len() - 1)
    };

    let mut out = Vec::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        // document-local names only predictable from earlier context
        let topic: Vec<Vec<u8>> = (0..rng.random_range(4..10))
            .map(|_| (0..rng.random_range(3..9)).map(|_| LETTERS[rng.random_range(0..LETTERS.len())]).collect())
            .collect();
        let doc_len = rng.random_range(600..2400);
        let start = out.len();
        while out.len() - start < doc_len {
            let words = rng.random_range(4..13);
            for w in 0..words {
                let word = if rng.random_bool(0.6) {
                    &topic[rng.random_range(0..topic.len())]
                } else {
                    &lexicon[zipf(&mut rng)]
                };
                if w == 0 {
                    out.push(word[0].to_ascii_uppercase());
                    out.extend_from_slice(&word[1..]);
                } else {
                    out.push(b' ');
                    out.extend_from_slice(word);
                }
            }
            out.extend_from_slice(if rng.random_bool(0.1) { b"? " } else { b". " });
        }
        out.extend_from_slice(b"\n\n");
    }
    out.truncate(n_bytes);
    out
}
