//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "DPGANPRM"
//! version u32      currently 1
//! count   u64      number of tensors
//! per tensor, in ParamSet order:
//!   name_len u64, name (UTF-8)
//!   ndim u64, dims (u64 each)
//!   data (f64 each)
//! ```
//!
//! Metadata (architecture, accountant state) goes to a JSON sidecar next to
//! the binary file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::grad_engine::{GradError, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"DPGANPRM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a parameter checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: needed {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("sidecar {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("length {v} too large")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.len()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("tensor name: {e}")))?
            .to_string();
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Corrupt(format!("shape {shape:?} too large")))?;
        let data = r
            .take(numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    fs::write(path, encode(params)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

/// `model.ckpt` -> `model.ckpt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<(), CheckpointError> {
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(meta).map_err(|source| CheckpointError::Json {
        path: side.clone(),
        source,
    })?;
    text.push('\n');
    fs::write(&side, text).map_err(io_err(&side))
}

pub fn load_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T, CheckpointError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Json { path: side, source })
}
