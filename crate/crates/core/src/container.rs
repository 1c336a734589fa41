//! `RANT` binary tensor container.
//!
//! Layout: magic `RANT`, version `0x01`, dtype byte (`0x01` f32, `0x02` f64),
//! rank byte, `rank` little-endian u32 extents, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RANT";
pub const VERSION: u8 = 0x01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0x01,
            DType::F64 => 0x02,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + dtype.width() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Decodes one container from the front of `bytes`, returning the tensor and
/// the number of bytes consumed. Errors carry a reason string only; callers
/// attach the source path.
pub fn decode_prefix(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let header = bytes.get(..7).ok_or("truncated header")?;
    if &header[..4] != MAGIC {
        return Err("bad magic".into());
    }
    if header[4] != VERSION {
        return Err(format!("unsupported version {}", header[4]));
    }
    let dtype = match header[5] {
        0x01 => DType::F32,
        0x02 => DType::F64,
        other => return Err(format!("unknown dtype byte {other:#04x}")),
    };
    let ndim = header[6] as usize;
    if ndim == 0 {
        return Err("rank must be positive".into());
    }
    let mut pos = 7;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = bytes.get(pos..pos + 4).ok_or("truncated extents")?;
        shape.push(u32::from_le_bytes(raw.try_into().unwrap()) as usize);
        pos += 4;
    }
    let numel: usize = shape.iter().product();
    let len = numel * dtype.width();
    let payload = bytes
        .get(pos..pos + len)
        .ok_or_else(|| format!("truncated payload: need {len} bytes, have {}", bytes.len().saturating_sub(pos)))?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, pos + len))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - used));
    }
    Ok(t)
}

pub fn write_file(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t, DType::F32);
        assert_eq!(&bytes[..7], b"RANT\x01\x01\x02");
        assert_eq!(&bytes[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 23);
    }

    #[test]
    fn truncation_and_garbage_are_reported() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t, DType::F64);
        assert!(decode(&bytes[..bytes.len() - 1]).unwrap_err().contains("truncated"));
        assert!(decode(b"NOPE\x01\x02\x01").unwrap_err().contains("magic"));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
            let t = Tensor::new(shape, data).unwrap();
            prop_assert_eq!(decode(&encode(&t, DType::F64)).unwrap(), t.clone());
            let narrow = decode(&encode(&t, DType::F32)).unwrap();
            for (a, b) in narrow.data().iter().zip(t.data()) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
