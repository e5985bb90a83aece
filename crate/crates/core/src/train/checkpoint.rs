//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"PBNR1"`, six `u64` model sizes (layers, dim, heads, ff, vocab, max_len),
//! `f64` eps, `u8` payload width (4 or 8), `u32`-prefixed tokenizer
//! fingerprint, `u32`-prefixed config JSON, `u64` init seed, `u32` parameter
//! count, then per parameter a `u32`-prefixed name, `u32` rank, `u64` dims
//! and the raw values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Float, Parameters, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PBNR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub model: ModelConfig,
    pub params: Parameters<F>,
    pub fingerprint: String,
    /// Echo of the run configuration that produced the checkpoint.
    pub config_json: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl<F: Float> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [m.num_layers, m.model_dim, m.num_heads, m.ff_dim, m.vocab_size, m.max_seq_len] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&m.eps.to_le_bytes());
        out.push(F::BYTES as u8);
        put_str(&mut out, &self.fingerprint);
        put_str(&mut out, &self.config_json);
        out.extend_from_slice(&self.params.rng_seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a PBNR1 checkpoint".into()));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u64("model config")? as usize;
        }
        let eps = f64::from_le_bytes(r.take(8, "eps")?.try_into().expect("8 bytes"));
        let model = ModelConfig {
            num_layers: dims[0],
            model_dim: dims[1],
            num_heads: dims[2],
            ff_dim: dims[3],
            vocab_size: dims[4],
            max_seq_len: dims[5],
            eps,
        };
        model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let width = r.take(1, "precision")?[0];
        let fingerprint = r.string("fingerprint")?;
        let config_json = r.string("config")?;
        let seed = r.u64("seed")?;
        let count = r.u32("parameter count")?;
        let mut params = Parameters::new(seed);
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data: Vec<F> = match width {
                4 => r
                    .take(numel * 4, "payload")?
                    .chunks_exact(4)
                    .map(|c| F::c(f64::from(f32::read_le(c))))
                    .collect(),
                8 => r
                    .take(numel * 8, "payload")?
                    .chunks_exact(8)
                    .map(|c| F::c(f64::read_le(c)))
                    .collect(),
                w => return Err(Error::Checkpoint(format!("unsupported payload width {w}"))),
            };
            params
                .insert(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            params,
            fingerprint,
            config_json,
        })
    }

    /// Refuses a checkpoint trained against another vocabulary.
    pub fn verify_fingerprint(&self, vocab_fingerprint: &str) -> Result<()> {
        if self.fingerprint != vocab_fingerprint {
            return Err(Error::Fingerprint {
                expected: vocab_fingerprint.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn save_checkpoint<F: Float>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; when `vocab_fingerprint` is given it must match.
pub fn load_checkpoint<F: Float>(path: &Path, vocab_fingerprint: Option<&str>) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(fp) = vocab_fingerprint {
        ckpt.verify_fingerprint(fp)?;
    }
    Ok(ckpt)
}
