//! Binary containers.
//!
//! Every on-disk artifact uses the same little-endian named-tensor framing:
//! a 4-byte magic, a u32 version, a format-specific header, then a run of
//! `(u32 name_len, name bytes, u8 dtype tag, u32 rank, u32 extents, payload)`
//! records. Writes are canonical-ordered so save -> load -> save is
//! byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Dtype, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EPCK";
pub const ACTIVATIONS_MAGIC: [u8; 4] = *b"EACT";
pub const DATASET_MAGIC: [u8; 4] = *b"ELTD";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
}

pub type Result<T> = std::result::Result<T, IoError>;

/// Tensor of either supported dtype, as found in containers.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            AnyTensor::F32(t) => t.numel(),
            AnyTensor::F64(t) => t.numel(),
        }
    }
}

/// Convert a typed tensor into the container representation.
pub fn erase<T: Scalar>(t: &Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        Dtype::F32 => AnyTensor::F32(t.cast::<f32>()),
        Dtype::F64 => AnyTensor::F64(t.cast::<f64>()),
    }
}

/// Recover the typed tensor; errors if the stored dtype differs.
pub fn typed<T: Scalar>(name: &str, t: &AnyTensor) -> Result<Tensor<T>> {
    if t.dtype() != T::DTYPE {
        return Err(IoError::Corrupt(format!(
            "tensor {name}: stored dtype {} does not match requested {}",
            t.dtype(),
            T::DTYPE
        )));
    }
    Ok(match t {
        AnyTensor::F32(t) => t.cast::<T>(),
        AnyTensor::F64(t) => t.cast::<T>(),
    })
}

// ── Primitive little-endian framing ─────────────────────────────────────

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| IoError::Corrupt("unexpected end of file".into()))?;
    Ok(b[0])
}

pub fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| IoError::Corrupt("unexpected end of file".into()))?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| IoError::Corrupt("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| IoError::Corrupt("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| IoError::Corrupt("unexpected end of file".into()))?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_magic<W: Write>(w: &mut W, magic: [u8; 4], version: u32) -> Result<()> {
    w.write_all(&magic)?;
    write_u32(w, version)
}

/// Check magic and return the version.
pub fn read_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<u32> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)
        .map_err(|_| IoError::Corrupt("file too short for magic".into()))?;
    if found != expected {
        return Err(IoError::BadMagic {
            expected: String::from_utf8_lossy(&expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    read_u32(r)
}

// ── Named tensor records ────────────────────────────────────────────────

pub fn write_named_tensor<W: Write>(w: &mut W, name: &str, t: &AnyTensor) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u8(w, t.dtype().tag())?;
    write_u32(w, t.shape().len() as u32)?;
    for &e in t.shape() {
        write_u32(w, e as u32)?;
    }
    match t {
        AnyTensor::F32(t) => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        AnyTensor::F64(t) => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_named_tensor<R: Read>(r: &mut R) -> Result<(String, AnyTensor)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(IoError::Corrupt(format!(
            "implausible tensor name length {name_len}"
        )));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|_| IoError::Corrupt("truncated tensor name".into()))?;
    let name = String::from_utf8(name)
        .map_err(|_| IoError::Corrupt("tensor name is not UTF-8".into()))?;
    let dtype = Dtype::from_tag(read_u8(r)?).ok_or_else(|| {
        IoError::Corrupt(format!("tensor {name}: unknown dtype tag"))
    })?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(IoError::Corrupt(format!("tensor {name}: rank {rank} > 8")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.size_bytes()];
    r.read_exact(&mut payload)
        .map_err(|_| IoError::Corrupt(format!("tensor {name}: truncated payload")))?;
    let tensor = match dtype {
        Dtype::F32 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F32(
                Tensor::new(shape, data)
                    .map_err(|e| IoError::Corrupt(format!("tensor {name}: {e}")))?,
            )
        }
        Dtype::F64 => {
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F64(
                Tensor::new(shape, data)
                    .map_err(|e| IoError::Corrupt(format!("tensor {name}: {e}")))?,
            )
        }
    };
    Ok((name, tensor))
}

// ── Activation dumps ────────────────────────────────────────────────────

pub const ACTIVATIONS_VERSION: u32 = 1;

/// Write captured tensors to an "EACT" container, preserving entry order.
pub fn write_activations(path: &Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, ACTIVATIONS_MAGIC, ACTIVATIONS_VERSION)?;
    write_u32(&mut w, entries.len() as u32)?;
    for (name, t) in entries {
        write_named_tensor(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let version = read_magic(&mut r, ACTIVATIONS_MAGIC)?;
    if version != ACTIVATIONS_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(read_named_tensor(&mut r)?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_tensor_round_trip_is_bit_exact() {
        let t = Tensor::<f32>::from_f64_slice(vec![2, 3], &[0.1, -2.0, 3.5, 0.0, 1e-7, 9.25])
            .unwrap();
        let mut buf = Vec::new();
        write_named_tensor(&mut buf, "weights.0", &erase(&t)).unwrap();
        let (name, back) = read_named_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(name, "weights.0");
        assert_eq!(erase(&t), back);
    }

    #[test]
    fn activations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.eact");
        let a = Tensor::<f64>::from_f64_slice(vec![4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64_slice(vec![2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
        let entries = vec![
            ("block0.attn".to_string(), erase(&a)),
            ("block0.mlp".to_string(), erase(&b)),
        ];
        write_activations(&path, &entries).unwrap();
        let back = read_activations(&path).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        let mut w = BufWriter::new(File::create(&path).unwrap());
        write_magic(&mut w, CHECKPOINT_MAGIC, 1).unwrap();
        w.flush().unwrap();
        drop(w);
        match read_activations(&path) {
            Err(IoError::BadMagic { expected, found }) => {
                assert_eq!(expected, "EACT");
                assert_eq!(found, "EPCK");
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.eact");
        let t = Tensor::<f32>::zeros(vec![64]);
        write_activations(&path, &[("x".into(), erase(&t))]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(matches!(read_activations(&path), Err(IoError::Corrupt(_))));
    }
}
