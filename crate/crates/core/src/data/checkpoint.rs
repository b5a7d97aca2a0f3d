//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CTVAECKP"  u16 version
//! u32 len, JSON header {"kind": .., "config": ..}
//! u32 n_tokens, n × (u16 len, utf-8 bytes)            vocabulary
//! u8 has_rng   [32-byte seed, u64 stream, u128 word position]
//! u32 n_params, n × (u16 name len, name, u8 rank, rank × u32 dim,
//!                    u64 numel, numel × f32, u32 crc32 of payload)
//! u8 has_optimizer [u64 step, 4 × f64 (lr, beta1, beta2, eps),
//!                   per param: m payload + crc, v payload + crc]
//! u32 crc32 of everything above
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::tensor::{Adam, AdamConfig, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"CTVAECKP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("checkpoint holds a `{found}` network, expected `{expected}`")]
    KindMismatch { expected: String, found: String },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn capture(adam: &Adam<f32>, params: &ParamSet<f32>) -> Self {
        let (m, v) = params
            .iter()
            .map(|(id, _, t)| adam.moments(id.index(), t.numel()))
            .unzip();
        OptimizerState {
            config: adam.config,
            step: adam.step_count(),
            m,
            v,
        }
    }

    pub fn into_adam(self) -> Adam<f32> {
        Adam::restore(self.config, self.step, self.m, self.v)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Vocab,
    pub params: ParamSet<f32>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<ChaCha8Rng>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u16(&mut self, x: u16) {
        self.bytes(&x.to_le_bytes());
    }
    fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }
    fn str16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }
    fn payload(&mut self, xs: &[f32]) {
        let start = self.0.len();
        for x in xs {
            self.bytes(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&self.0[start..]);
        self.u32(crc);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> CheckpointError {
    CheckpointError::Integrity("unexpected end of data".into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.buf.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn str16(&mut self) -> Result<String, CheckpointError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Integrity("invalid utf-8 string".into()))
    }
    fn payload(&mut self, numel: usize, what: &str) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(numel.checked_mul(4).ok_or_else(truncated)?)?;
        let crc = self.u32()?;
        if crc32fast::hash(bytes) != crc {
            return Err(CheckpointError::Integrity(format!("checksum mismatch in `{what}`")));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn flag(&mut self) -> Result<bool, CheckpointError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(CheckpointError::Integrity(format!("bad flag byte {x}"))),
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u16(FORMAT_VERSION);
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
        })?;
        w.u32(header.len() as u32);
        w.bytes(&header);

        let tokens = self.vocab.all_tokens();
        w.u32(tokens.len() as u32);
        for t in tokens {
            w.str16(t);
        }

        match &self.rng {
            Some(r) => {
                w.u8(1);
                w.bytes(&r.get_seed());
                w.u64(r.get_stream());
                w.bytes(&r.get_word_pos().to_le_bytes());
            }
            None => w.u8(0),
        }

        w.u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.str16(name);
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.u64(t.numel() as u64);
            w.payload(t.data());
        }

        match &self.optimizer {
            Some(o) => {
                if o.m.len() != self.params.len() || o.v.len() != self.params.len() {
                    return Err(CheckpointError::Integrity(
                        "optimizer state does not match parameter count".into(),
                    ));
                }
                w.u8(1);
                w.u64(o.step);
                for x in [o.config.lr, o.config.beta1, o.config.beta2, o.config.eps] {
                    w.bytes(&x.to_le_bytes());
                }
                for (m, v) in o.m.iter().zip(&o.v) {
                    w.u64(m.len() as u64);
                    w.payload(m);
                    w.u64(v.len() as u64);
                    w.payload(v);
                }
            }
            None => w.u8(0),
        }

        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            buf,
            pos: MAGIC.len(),
        };
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if buf.len() < r.pos + 4 {
            return Err(truncated());
        }
        let body_end = buf.len() - 4;
        let trailer = u32::from_le_bytes(buf[body_end..].try_into().unwrap());
        if crc32fast::hash(&buf[..body_end]) != trailer {
            return Err(CheckpointError::Integrity("file checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: &buf[..body_end],
            pos: r.pos,
        };

        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;

        let n_tokens = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
        for _ in 0..n_tokens {
            tokens.push(r.str16()?);
        }
        let specials = super::vocab::SPECIALS;
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials {
            return Err(CheckpointError::Integrity("vocabulary lacks special symbols".into()));
        }
        let vocab = Vocab::from_tokens(tokens.into_iter().skip(specials.len()));

        let rng = if r.flag()? {
            let seed: [u8; 32] = r.arr()?;
            let stream = r.u64()?;
            let pos = u128::from_le_bytes(r.arr()?);
            let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(pos);
            Some(rng)
        } else {
            None
        };

        let n_params = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let name = r.str16()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = r.u64()? as usize;
            if shape.iter().product::<usize>() != numel {
                return Err(CheckpointError::Integrity(format!("shape/length mismatch in `{name}`")));
            }
            let data = r.payload(numel, &name)?;
            if params.id(&name).is_some() {
                return Err(CheckpointError::Integrity(format!("duplicate parameter `{name}`")));
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Integrity(e.to_string()))?;
            params.insert(name, t);
        }

        let optimizer = if r.flag()? {
            let step = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for (_, name, t) in params.iter() {
                for buf in [&mut m, &mut v] {
                    let n = r.u64()? as usize;
                    if n != t.numel() {
                        return Err(CheckpointError::Integrity(format!(
                            "optimizer moment size mismatch for `{name}`"
                        )));
                    }
                    buf.push(r.payload(n, name)?);
                }
            }
            Some(OptimizerState { config, step, m, v })
        } else {
            None
        };

        if r.pos != r.buf.len() {
            return Err(CheckpointError::Integrity("trailing bytes after payload".into()));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            vocab,
            params,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.kind != expected {
            return Err(CheckpointError::KindMismatch {
                expected: expected.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }
}
