//! `PARM` parameter checkpoints.
//!
//! ```text
//! magic   b"PARM"
//! version u16        (currently 1)
//! count   u32        number of tensors
//! count × { name_len u32, name UTF-8, ndims u32, ndims × u64 dims, f64 values (LE) }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numkit::{Matrix, ParamSet};

pub const PARAM_MAGIC: &[u8; 4] = b"PARM";
pub const PARAM_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a PARM checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated at byte offset {0}")]
    Truncated(usize),
    #[error("tensor name at byte offset {0} is not valid UTF-8")]
    InvalidName(usize),
    #[error("tensor `{name}` has {ndims} dimensions; only matrices are supported")]
    Rank { name: String, ndims: u32 },
    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),
    #[error("checkpoint tensor table does not match the model: {0}")]
    Mismatch(String),
    #[error("{0} trailing bytes after the tensor table")]
    TrailingBytes(usize),
}

pub fn encode_params<P: ParamSet + ?Sized>(params: &P) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the named tensor table.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Matrix)>, CheckpointError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<(usize, &[u8]), CheckpointError> {
        if bytes.len() - pos < n {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let start = pos;
        pos += n;
        Ok((start, &bytes[start..start + n]))
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));

    if take(4).map(|(_, m)| m != PARAM_MAGIC).unwrap_or(true) {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(take(2)?.1.try_into().expect("2 bytes"));
    if version != PARAM_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = u32_at(take(4)?.1);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32_at(take(4)?.1) as usize;
        let (at, raw) = take(len)?;
        let name = std::str::from_utf8(raw).map_err(|_| CheckpointError::InvalidName(at))?.to_string();
        let ndims = u32_at(take(4)?.1);
        if ndims != 2 {
            return Err(CheckpointError::Rank { name, ndims });
        }
        let rows = u64_at(take(8)?.1) as usize;
        let cols = u64_at(take(8)?.1) as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or(CheckpointError::Truncated(bytes.len()))?;
        let (_, raw) = take(n)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(u64_at).map(f64::from_bits).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        out.push((name, Matrix::from_vec(rows, cols, data).expect("length checked")));
    }
    if pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - pos));
    }
    Ok(out)
}

/// Overwrites `params` from a checkpoint whose names and shapes must match
/// exactly and in order.
pub fn load_into<P: ParamSet + ?Sized>(bytes: &[u8], params: &mut P) -> Result<(), CheckpointError> {
    let tensors = decode_tensors(bytes)?;
    let mut targets = params.tensors_mut();
    if tensors.len() != targets.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            targets.len()
        )));
    }
    for ((name, m), (tname, t)) in tensors.iter().zip(&targets) {
        if name != tname || m.shape() != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "`{name}` {:?} vs model `{tname}` {:?}",
                m.shape(),
                t.shape()
            )));
        }
    }
    for ((_, m), (_, t)) in tensors.into_iter().zip(targets.iter_mut()) {
        **t = m;
    }
    Ok(())
}

pub fn save<P: ParamSet + ?Sized>(path: &Path, params: &P) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    }
    fs::write(path, encode_params(params)).map_err(|source| CheckpointError::Io { path: path.into(), source })
}

pub fn read(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })
}
