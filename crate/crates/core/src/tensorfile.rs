//! Raw tensor files with a fixed 16-byte header.
//!
//! Layout (little-endian throughout):
//! ```text
//! offset  size  field
//! 0       4     magic "MDT1"
//! 4       1     dtype code (1 = f64, 2 = u8)
//! 5       1     rank (1..=5)
//! 6       10    dims, five u16 values (unused dims are zero)
//! 16      ...   payload, row-major
//! ```
//! Files round-trip bit-exactly; writes go to a sibling temp file that is
//! renamed into place so readers never observe a partial file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MDT1";
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_U8: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        RawTensor {
            dims,
            data: TensorData::F64(data),
        }
    }

    pub fn from_u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        RawTensor {
            dims,
            data: TensorData::U8(data),
        }
    }

    pub fn from_matrix(t: &Tensor) -> Self {
        RawTensor::from_f64(vec![t.rows(), t.cols()], t.data().to_vec())
    }

    pub fn to_matrix(&self) -> Result<Tensor> {
        let TensorData::F64(data) = &self.data else {
            return Err(CoreError::TensorFile {
                path: String::new(),
                reason: "expected f64 payload".into(),
            });
        };
        if self.dims.len() != 2 {
            return Err(CoreError::TensorFile {
                path: String::new(),
                reason: format!("expected rank 2, got rank {}", self.dims.len()),
            });
        }
        Ok(Tensor::from_vec(self.dims[0], self.dims[1], data.clone()))
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

fn file_error(path: &Path, reason: impl Into<String>) -> CoreError {
    CoreError::TensorFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_tensor(path: &Path, tensor: &RawTensor) -> Result<()> {
    if tensor.dims.is_empty() || tensor.dims.len() > 5 {
        return Err(file_error(path, format!("rank {} unsupported", tensor.dims.len())));
    }
    for &d in &tensor.dims {
        if d == 0 || d > u16::MAX as usize {
            return Err(file_error(path, format!("dimension {d} out of u16 range")));
        }
    }

    let mut buf = Vec::with_capacity(
        16 + match &tensor.data {
            TensorData::F64(v) => v.len() * 8,
            TensorData::U8(v) => v.len(),
        },
    );
    buf.extend_from_slice(&MAGIC);
    buf.push(match tensor.data {
        TensorData::F64(_) => DTYPE_F64,
        TensorData::U8(_) => DTYPE_U8,
    });
    buf.push(tensor.dims.len() as u8);
    for i in 0..5 {
        let d = tensor.dims.get(i).copied().unwrap_or(0) as u16;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match &tensor.data {
        TensorData::F64(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => buf.extend_from_slice(v),
    }

    // Write-then-rename so an interrupted writer never leaves a truncated
    // file at the final path. No fsync: visibility atomicity is the
    // contract here, and checkpoints hold hundreds of small files.
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(file_error(path, "shorter than the 16-byte header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(file_error(path, "bad magic"));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    if rank == 0 || rank > 5 {
        return Err(file_error(path, format!("bad rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + 2 * i;
        let d = u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize;
        if d == 0 {
            return Err(file_error(path, format!("zero dimension at axis {i}")));
        }
        dims.push(d);
    }
    let count: usize = dims.iter().product();
    let payload = &bytes[16..];
    let data = match dtype {
        DTYPE_F64 => {
            if payload.len() != count * 8 {
                return Err(file_error(
                    path,
                    format!("payload {} bytes, expected {}", payload.len(), count * 8),
                ));
            }
            let mut v = Vec::with_capacity(count);
            for chunk in payload.chunks_exact(8) {
                v.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            TensorData::F64(v)
        }
        DTYPE_U8 => {
            if payload.len() != count {
                return Err(file_error(
                    path,
                    format!("payload {} bytes, expected {}", payload.len(), count),
                ));
            }
            TensorData::U8(payload.to_vec())
        }
        other => return Err(file_error(path, format!("unknown dtype code {other}"))),
    };
    Ok(RawTensor { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let values = vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 1.0 / 3.0, 0.0, -0.0];
        let t = RawTensor::from_f64(vec![2, 3], values.clone());
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims, vec![2, 3]);
        let TensorData::F64(got) = back.data else { panic!() };
        for (a, b) in got.iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Writing again produces identical bytes.
        let first = std::fs::read(&path).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn u8_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.bin");
        let t = RawTensor::from_u8(vec![4, 4], (0..16).map(|i| (i % 2) as u8).collect());
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn rank3_image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        let t = RawTensor::from_f64(vec![3, 2, 3], (0..18).map(|i| i as f64 / 18.0).collect());
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x01\x02aaaaaaaaaa_payload").unwrap();
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        let t = RawTensor::from_f64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        write_tensor(&path, &t).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_tensor(&path).is_err());
    }
}
