//! Weight container: versioned magic, JSON manifest, named little-endian tensors.
//!
//! ```text
//! "MOISCKPT" | u32 version | u64 manifest_len | manifest (UTF-8 JSON)
//! u32 count | count × { u16 name_len | name | u8 dtype | u8 ndim | ndim × u64 dim | payload }
//! ```

use std::io::{Read, Write};

use super::params::ParamStore;
use super::value::{numel, DType, Real, Tensor};
use super::TensorError;

pub const MAGIC: &[u8; 8] = b"MOISCKPT";
pub const VERSION: u32 = 1;

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, TensorError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorError> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

pub fn write_checkpoint<T: Real, W: Write>(
    w: &mut W,
    manifest: &serde_json::Value,
    params: &ParamStore<T>,
) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let m = serde_json::to_vec(manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(&(m.len() as u64).to_le_bytes())?;
    w.write_all(&m)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, t) in params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[T::DTYPE.tag(), t.ndim() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => payload.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&v.to_f64c().to_le_bytes()),
            }
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

/// Reads a checkpoint, converting stored tensors to `T`.
pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<(serde_json::Value, ParamStore<T>), TensorError> {
    let magic = read_exact(r, 8)?;
    if magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic header".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mlen = read_u64(r)? as usize;
    let manifest: serde_json::Value =
        serde_json::from_slice(&read_exact(r, mlen)?).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let count = read_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(read_exact(r, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact(r, nlen)?).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let hdr = read_exact(r, 2)?;
        let dtype = DType::from_tag(hdr[0]).ok_or_else(|| TensorError::Checkpoint(format!("unknown dtype tag {}", hdr[0])))?;
        let mut shape = Vec::with_capacity(hdr[1] as usize);
        for _ in 0..hdr[1] {
            shape.push(read_u64(r)? as usize);
        }
        let n = numel(&shape);
        let raw = read_exact(r, n * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64c(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((manifest, params))
}
