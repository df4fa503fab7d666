//! `SERCKPT1` checkpoint files.
//!
//! Layout (little-endian): magic `SERCKPT1`, u32 version, u32 tensor count,
//! then per tensor: u16 name length, UTF-8 name, u8 dtype, u8 ndim, u32
//! dims, raw values. Dtype 0 is `f32`; dtype 1 is `f64`, written only when
//! some value is not exactly representable in `f32`, so loading always
//! reproduces the saved values bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;

use super::{ArchConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SERCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad or truncated header)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("tensor {tensor}: {detail}")]
    ShapeMismatch { tensor: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Serialize `params` in checkpoint format.
pub fn write_checkpoint(out: &mut impl Write, params: &ModelParams) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (spec, t) in params.iter() {
        let name = spec.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        let f32_exact = t.data().iter().all(|&v| (v as f32) as f64 == v || v.is_nan());
        out.write_all(&[if f32_exact { DTYPE_F32 } else { DTYPE_F64 }, t.ndim() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * if f32_exact { 4 } else { 8 });
        for &v in t.data() {
            if f32_exact {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params).map_err(io)?;
    fs::write(path, buf).map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse checkpoint bytes into named tensors, in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32().ok_or(CheckpointError::BadMagic)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let count = c.u32().ok_or(CheckpointError::BadMagic)?;
    let mut out = Vec::new();
    for i in 0..count {
        let placeholder = format!("#{i}");
        let bad = |tensor: &str, detail: &str| CheckpointError::ShapeMismatch {
            tensor: tensor.to_string(),
            detail: detail.to_string(),
        };
        let name_len = c.u16().ok_or_else(|| bad(&placeholder, "truncated name"))?;
        let name = c
            .take(name_len as usize)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad(&placeholder, "truncated or non-UTF-8 name"))?
            .to_string();
        let dtype = c.u8().ok_or_else(|| bad(&name, "truncated header"))?;
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            other => return Err(bad(&name, &format!("unknown dtype {other}"))),
        };
        let ndim = c.u8().ok_or_else(|| bad(&name, "truncated header"))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(c.u32().ok_or_else(|| bad(&name, "truncated dims"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(&name, &format!("invalid shape {shape:?}")))?;
        let raw = numel
            .checked_mul(width)
            .and_then(|n| c.take(n))
            .ok_or_else(|| bad(&name, "truncated values"))?;
        let data: Vec<f64> = if width == 4 {
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect()
        };
        let t = Tensor::new(&shape, data).map_err(|e| bad(&name, &e.to_string()))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::ShapeMismatch {
            tensor: "<end>".into(),
            detail: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok(out)
}

/// Read a checkpoint and check every tensor against `arch`.
pub fn load_checkpoint(path: &Path, arch: &ArchConfig) -> Result<ModelParams, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelParams::from_tensors(arch, read_checkpoint(&bytes)?)
}
