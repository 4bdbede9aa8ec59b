//! The `.flmt` tensor container.
//!
//! Layout: 8-byte magic `FLMTENS1`, `u32` rank, `rank × u64` extents, then the
//! row-major payload as little-endian `f32`. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FLMTENS1";

/// Encodes a shape and `f32` payload into the container bytes.
pub fn encode_f32(shape: &[usize], data: &[f32]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(12 + 8 * shape.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes container bytes; `origin` only labels error messages.
pub fn decode_f32(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |msg: String| Error::format(origin, msg);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing FLMTENS1 magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("extent overflow".into()))?;
    let expected = n
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| bad("extent overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, shape {:?} needs {}",
            bytes.len() - header,
            shape,
            n * 4
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_f32(shape, data);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32(&bytes, path)
}

/// Writes a tensor, narrowing to `f32`.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let data: Vec<f32> = t.data().iter().map(|&x| x as f32).collect();
    write_f32(path, t.shape(), &data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let (shape, data) = read_f32(path)?;
    Tensor::new(&shape, data.into_iter().map(f64::from).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_layout() {
        let bytes = encode_f32(&[2, 1], &[1.5, -2.0]);
        assert_eq!(&bytes[..8], b"FLMTENS1");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 16 + 8);
        let (shape, data) = decode_f32(&bytes, Path::new("x")).unwrap();
        assert_eq!(shape, vec![2, 1]);
        assert_eq!(data, vec![1.5, -2.0]);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut bytes = encode_f32(&[3], &[1.0, 2.0, 3.0]);
        bytes.pop();
        let err = decode_f32(&bytes, Path::new("frames.flmt")).unwrap_err();
        assert!(err.to_string().contains("frames.flmt"), "{err}");
        assert!(decode_f32(b"NOTMAGIC0000", Path::new("y")).is_err());
    }
}
