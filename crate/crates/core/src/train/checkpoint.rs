//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "TTTCKPT\0"
//! version   u32      1
//! dtype     u8       4 (f32) or 8 (f64)
//! config    u64 length, then UTF-8 JSON of the training config
//! digest    32 bytes sha256 of the config JSON
//! step      u64
//! count     u64 number of tensors
//! tensor    u32 name length, name, u32 rank, rank × u64 extents,
//!           raw little-endian payload
//! trailer   32 bytes sha256 of every preceding byte
//! ```
//!
//! Tensors are named `param/<name>`, `adam_m/<name>` and `adam_v/<name>`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{Precision, TrainConfig};
use super::optim::AdamState;
use crate::backbone::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"TTTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f64> {
    pub config: TrainConfig,
    /// Optimizer updates applied.
    pub step: u64,
    pub params: ModelParams<Tensor<T>>,
    pub adam: Option<AdamState<T>>,
}

fn dtype_of<T: Real>() -> u8 {
    std::mem::size_of::<T>() as u8
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype_of::<T>());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&Sha256::digest(&json));
        out.extend_from_slice(&self.step.to_le_bytes());

        let named = self.params.named();
        let mut tensors: Vec<(String, &Tensor<T>)> = named.iter().map(|(n, t)| (format!("param/{n}"), *t)).collect();
        if let Some(a) = &self.adam {
            for (prefix, moments) in [("adam_m", &a.m), ("adam_v", &a.v)] {
                for ((n, _), t) in named.iter().zip(moments) {
                    tensors.push((format!("{prefix}/{n}"), t));
                }
            }
        }
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in t.data() {
                if dtype_of::<T>() == 4 {
                    out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&x.f64().to_le_bytes());
                }
            }
        }
        let trailer = Sha256::digest(&out);
        out.extend_from_slice(&trailer);
        out
    }

    /// Parses a checkpoint, using the model config stored in it.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = RawCheckpoint::parse(bytes)?;
        let model = raw.config.model.clone();
        raw.into_typed(&model)
    }

    /// Parses a checkpoint and places its tensors into the layout of
    /// `model`, failing on the first tensor that is missing or misshapen.
    pub fn from_bytes_for(bytes: &[u8], model: &ModelConfig) -> Result<Self> {
        RawCheckpoint::parse(bytes)?.into_typed(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never clobbers the last
        // good checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }

    pub fn load_for(path: &Path, model: &ModelConfig) -> Result<Self> {
        Self::from_bytes_for(&read(path)?, model)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))
}

/// Storage precision of a checkpoint file, read from its header.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    header(&mut r)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(bad(format!("truncated file while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| bad(format!("implausible {what} {n}")))
    }
}

fn header(r: &mut Reader) -> Result<Precision> {
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, not a checkpoint file")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    match r.take(1, "dtype")?[0] {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        other => Err(bad(format!("unknown dtype code {other}"))),
    }
}

struct RawCheckpoint {
    config: TrainConfig,
    step: u64,
    dtype: u8,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl RawCheckpoint {
    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let precision = header(&mut r)?;
        let dtype = match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let json_len = r.len("config length")?;
        let json = r.take(json_len, "config")?;
        let digest = r.take(32, "config digest")?;
        if Sha256::digest(json).as_slice() != digest {
            return Err(bad("config digest mismatch"));
        }
        let config: TrainConfig =
            serde_json::from_slice(json).map_err(|e| bad(format!("config is not valid JSON: {e}")))?;
        let step = r.u64("step")?;
        let count = r.len("tensor count")?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 3 {
                return Err(bad(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len("extent")?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| bad("extent overflow"))?;
            let payload = r.take(numel.saturating_mul(dtype as usize), &format!("payload of {name}"))?;
            let data = if dtype == 4 {
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect()
            } else {
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()
            };
            tensors.push((name, shape, data));
        }
        let body_end = r.pos;
        let trailer = r.take(32, "trailing digest")?;
        if Sha256::digest(&bytes[..body_end]).as_slice() != trailer {
            return Err(bad("file digest mismatch, payload corrupted"));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, step, dtype, tensors })
    }

    fn into_typed<T: Real>(self, model: &ModelConfig) -> Result<Checkpoint<T>> {
        if self.dtype != dtype_of::<T>() {
            return Err(bad(format!(
                "checkpoint stores {}-byte floats, requested {}-byte",
                self.dtype,
                dtype_of::<T>()
            )));
        }
        let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> =
            self.tensors.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        let template = ModelParams::<Tensor<f64>>::init(model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let named = template.named();
        let take = |by_name: &mut HashMap<String, (Vec<usize>, Vec<f64>)>, prefix: &str| -> Result<Vec<Tensor<T>>> {
            named
                .iter()
                .map(|(n, t)| {
                    let key = format!("{prefix}/{n}");
                    let (shape, data) = by_name.remove(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
                    if shape != t.shape() {
                        return Err(Error::TensorShape {
                            name: key,
                            expected: t.shape().to_vec(),
                            found: shape,
                        });
                    }
                    Tensor::new(&shape, data.into_iter().map(T::c).collect())
                })
                .collect()
        };
        let params = template.zip_values(take(&mut by_name, "param")?)?;
        let has_adam = by_name.keys().any(|k| k.starts_with("adam_m/"));
        let adam = if has_adam {
            let m = take(&mut by_name, "adam_m")?;
            let v = take(&mut by_name, "adam_v")?;
            Some(AdamState { step: self.step, m, v })
        } else {
            None
        };
        if let Some(extra) = by_name.keys().min() {
            return Err(bad(format!("unexpected tensor {extra} for this model config")));
        }
        Ok(Checkpoint {
            config: TrainConfig { model: model.clone(), ..self.config },
            step: self.step,
            params,
            adam,
        })
    }
}
