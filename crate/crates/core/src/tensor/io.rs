//! FLT1 binary tensor files.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes        | content                              |
//! |--------------|--------------------------------------|
//! | 0..4         | magic `46 4C 54 31` ("FLT1")         |
//! | 4            | version, currently 1                 |
//! | 5            | dtype: 0 = f32, 1 = f64              |
//! | 6            | rank, 1..=8                          |
//! | 7            | zero pad                             |
//! | 8..8+8·rank  | extents as u64                       |
//! | then         | row-major payload in the given dtype |

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FLT1";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 8;
const HEADER_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Serializes a tensor. Fails if a value does not fit the requested dtype.
pub fn encode(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if tensor.rank() > MAX_RANK {
        return Err(Error::InvalidTensor(format!(
            "rank {} exceeds FLT1 limit of {MAX_RANK}",
            tensor.rank()
        )));
    }
    let mut out =
        Vec::with_capacity(HEADER_LEN + 8 * tensor.rank() + dtype.size() * tensor.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), tensor.rank() as u8, 0]);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for (i, &v) in tensor.data().iter().enumerate() {
                let narrowed = v as f32;
                if !narrowed.is_finite() {
                    return Err(Error::InvalidTensor(format!(
                        "value {v} at flat index {i} overflows f32"
                    )));
                }
                out.extend_from_slice(&narrowed.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses an FLT1 byte buffer.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:02X?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(format_err(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| format_err(5, format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(format_err(6, format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    if bytes[7] != 0 {
        return Err(format_err(7, "pad byte must be zero"));
    }
    let extents_end = HEADER_LEN + 8 * rank;
    if bytes.len() < extents_end {
        return Err(format_err(bytes.len(), "truncated extent table"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for axis in 0..rank {
        let at = HEADER_LEN + 8 * axis;
        let raw = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        if raw == 0 {
            return Err(format_err(at, format!("extent of axis {axis} is zero")));
        }
        let extent = usize::try_from(raw)
            .ok()
            .and_then(|e| count.checked_mul(e).map(|c| (e, c)));
        let (extent, c) =
            extent.ok_or_else(|| format_err(at, format!("extent {raw} is too large")))?;
        count = c;
        shape.push(extent);
    }
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err(HEADER_LEN, "payload size overflows"))?;
    let expected = extents_end + payload_len;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("payload should end at byte {expected}, file has {} bytes", bytes.len()),
        ));
    }
    let payload = &bytes[extents_end..];
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(
            extents_end + i * dtype.size(),
            format!("non-finite scalar at flat index {i}"),
        ));
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<(Tensor, DType)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_file(path: impl AsRef<Path>, tensor: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]).unwrap()
    }

    #[test]
    fn header_is_bit_exact() {
        let bytes = encode(&sample(), DType::F64).unwrap();
        assert_eq!(&bytes[..8], &[0x46, 0x4C, 0x54, 0x31, 1, 1, 2, 0]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &0.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 6 * 8);
        let bytes32 = encode(&sample(), DType::F32).unwrap();
        assert_eq!(bytes32[5], 0);
        assert_eq!(&bytes32[24..28], &0.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_malformed_headers() {
        let good = encode(&sample(), DType::F64).unwrap();
        let offset_of = |bytes: &[u8]| match decode(bytes) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = good.clone();
        bad[1] = b'X';
        assert_eq!(offset_of(&bad), 0);
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(offset_of(&bad), 4);
        let mut bad = good.clone();
        bad[5] = 7;
        assert_eq!(offset_of(&bad), 5);
        let mut bad = good.clone();
        bad[6] = 0;
        assert_eq!(offset_of(&bad), 6);
        let mut bad = good.clone();
        bad[6] = 9;
        assert_eq!(offset_of(&bad), 6);
        let mut bad = good.clone();
        bad[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert_eq!(offset_of(&bad), 8);
        assert_eq!(offset_of(&good[..good.len() - 1]), (good.len() - 1) as u64);
        let mut long = good.clone();
        long.push(0);
        assert!(decode(&long).is_err());
        assert_eq!(offset_of(&good[..3]), 3);
        let mut nan = good;
        nan[32..40].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(offset_of(&nan), 32);
    }

    #[test]
    fn f32_narrowing_overflow_is_an_error() {
        let t = Tensor::new(vec![1], vec![1e300]).unwrap();
        assert!(encode(&t, DType::F32).is_err());
    }
}
