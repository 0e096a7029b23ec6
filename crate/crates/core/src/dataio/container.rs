//! `VWT1` tensor files: magic, u8 dtype (0 = f32), u32 rank, u32 dims, then
//! the row-major payload. Every integer and float is little-endian.

use std::fs;
use std::path::Path;

use super::{DataError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VWT1";
const DTYPE_F32: u8 = 0;
pub const MAX_RANK: usize = 8;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(DataError::Format(format!("rank {} exceeds {MAX_RANK}", t.rank())));
    }
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let b = bytes.get(*pos..*pos + 4).ok_or(DataError::TruncatedFile)?;
    *pos += 4;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic {
            expected: "VWT1".into(),
        });
    }
    let dtype = *bytes.get(4).ok_or(DataError::TruncatedFile)?;
    if dtype != DTYPE_F32 {
        return Err(DataError::Format(format!("unsupported dtype code {dtype}")));
    }
    let mut pos = 5;
    let rank = read_u32(bytes, &mut pos)? as usize;
    if rank > MAX_RANK {
        return Err(DataError::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(bytes, &mut pos).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != 4 * numel {
        return Err(DataError::LengthMismatch {
            expected: 4 * numel,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(shape, data).expect("payload length checked"))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?).map_err(|e| DataError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path).map_err(|e| DataError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_file_is_seventeen_bytes() {
        let bytes = encode_tensor(&Tensor::scalar(42.0)).unwrap();
        assert_eq!(bytes.len(), 17);
        assert_eq!(&bytes[..5], b"VWT1\0");
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(&bytes[13..], &42.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let data: Vec<f32> = (0..105).map(|i| (i as f32 * 1.37).sin() * 1e3).collect();
        let t = Tensor::new(vec![3, 5, 7], data).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = encode_tensor(&Tensor::zeros(&[2, 2])).unwrap();
        bytes.pop();
        assert!(matches!(
            decode_tensor(&bytes),
            Err(DataError::LengthMismatch {
                expected: 16,
                found: 15
            })
        ));
        assert!(matches!(decode_tensor(b"VWT2\0"), Err(DataError::BadMagic { .. })));
    }
}
