//! Binary checkpoint format.
//!
//! ```text
//! "LBTC"                      4 bytes magic
//! version                     u32 LE
//! metadata length             u32 LE
//! metadata                    UTF-8 JSON (CheckpointMeta)
//! repeated until EOF:
//!   name length               u32 LE
//!   name                      UTF-8
//!   dtype tag                 u8 (0 = f32)
//!   rank                      u32 LE
//!   dims                      rank x u64 LE
//!   data                      prod(dims) x f32 LE
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, Parameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LBTC";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported dtype tag {0}")]
    Dtype(u8),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("invalid metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("invalid tensor name encoding")]
    Name,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// JSON metadata block stored ahead of the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// Training mode label (`ldpe`, `orpe`, `none`, `prompted`, `mntpp`).
    #[serde(default)]
    pub mode: Option<String>,
}

pub fn to_bytes(params: &Parameters<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>, CheckpointError> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.num_params() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in params.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Parameters<f32>, CheckpointMeta), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Name)?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Dtype(dtype));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(ModelError::from)?;
        tensors.push((name, t));
    }
    let params = Parameters::from_named(meta.model_config, tensors)?;
    Ok((params, meta))
}

pub fn save(path: &Path, params: &Parameters<f32>, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    let bytes = to_bytes(params, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(Parameters<f32>, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> (Parameters<f32>, CheckpointMeta) {
        let cfg = ModelConfig {
            vocab_size: 19,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            max_seq: 16,
            rope_base: 10_000.0,
        };
        let meta = CheckpointMeta {
            model_config: cfg,
            step: 42,
            seed: 7,
            mode: Some("ldpe".into()),
        };
        (Parameters::init(cfg, 3).unwrap(), meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, meta) = params();
        let bytes = to_bytes(&p, &meta).unwrap();
        assert_eq!(&bytes[..4], b"LBTC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let (q, meta2) = from_bytes(&bytes).unwrap();
        assert_eq!(meta, meta2);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(to_bytes(&q, &meta2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (p, meta) = params();
        let bytes = to_bytes(&p, &meta).unwrap();
        assert!(matches!(from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn file_round_trip() {
        let (p, meta) = params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ckpt.lbtc");
        save(&path, &p, &meta).unwrap();
        let (q, _) = load(&path).unwrap();
        assert_eq!(p, q);
    }
}
