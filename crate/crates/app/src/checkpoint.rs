//! Binary checkpoint codec.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "PMSE" | version | config words x 12 | frozen-content hash (32 bytes)
//! tensor count
//! per tensor: name length | UTF-8 name | frozen (1 byte) | rank | dims | f32 data
//! ```

use std::fs;
use std::path::Path;

use promise_core::autodiff::{ParamStore, Tensor};
use promise_core::model::{ModelConfig, CONFIG_WORDS};

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"PMSE";
pub const VERSION: u32 = 1;

/// A model configuration plus every named tensor with its freeze flag.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, store: ParamStore<f32>) -> Self {
        Self { config, store }
    }

    pub fn frozen_hash(&self) -> [u8; 32] {
        self.store.frozen_hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for w in self.config.to_words() {
            put_u32(&mut out, w);
        }
        out.extend_from_slice(&self.frozen_hash());
        put_u32(&mut out, self.store.len() as u32);
        for (_, name, t) in self.store.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(t.is_frozen() as u8);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            out.reserve(t.numel() * 4);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(AppError::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AppError::Checkpoint(format!("unsupported version {version}")));
        }
        let words = (0..CONFIG_WORDS).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::from_words(&words)?;
        let mut header_hash = [0u8; 32];
        header_hash.copy_from_slice(r.take(32)?);
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| AppError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(AppError::Checkpoint(format!("{name}: bad frozen flag {b}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()));
            let n = n.ok_or_else(|| AppError::Checkpoint(format!("{name}: tensor {shape:?} exceeds file")))?;
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let mut t = Tensor::new(&shape, data)?;
            t.set_frozen(frozen);
            store.insert(&name, t)?;
        }
        if r.remaining() != 0 {
            return Err(AppError::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        let found = store.frozen_hash();
        if found != header_hash {
            return Err(AppError::HashMismatch {
                expected: hex::encode(header_hash),
                found: hex::encode(found),
            });
        }
        Ok(Self { config, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(AppError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
