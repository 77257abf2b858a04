//! `BTEN` tensor container files.
//!
//! Layout: magic `BTEN`, version byte `0x01`, dtype byte (0 = f32, 1 = f64,
//! 2 = u8), ndim byte, `ndim` little-endian u32 dims, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BTEN";
pub const VERSION: u8 = 0x01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Decoded file contents.
#[derive(Clone, Debug, PartialEq)]
pub enum BtenData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bten {
    pub shape: Vec<usize>,
    pub data: BtenData,
}

impl Bten {
    pub fn f64(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: BtenData::F64(t.data().to_vec()),
        }
    }

    /// Narrowing copy; values lose precision beyond f32.
    pub fn f32(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: BtenData::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            shape,
            data: BtenData::U8(data),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            BtenData::F32(_) => DType::F32,
            BtenData::F64(_) => DType::F64,
            BtenData::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            BtenData::F32(v) => v.len(),
            BtenData::F64(v) => v.len(),
            BtenData::U8(v) => v.len(),
        }
    }

    /// Widens any float payload to an f64 tensor. U8 payloads convert too.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = match &self.data {
            BtenData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            BtenData::F64(v) => v.clone(),
            BtenData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::invalid("too many dimensions for BTEN"));
        }
        let n: usize = self.shape.iter().product();
        if n != self.len() {
            return Err(Error::invalid(format!(
                "BTEN shape {:?} does not match {} values",
                self.shape,
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + n * self.dtype().width());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            BtenData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BtenData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BtenData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::corrupt(path, reason);
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_byte(bytes[5]).ok_or_else(|| bad("unknown dtype"))?;
        let ndim = bytes[6] as usize;
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let shape: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != n * dtype.width() {
            return Err(bad(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                n * dtype.width()
            )));
        }
        let data = match dtype {
            DType::F32 => BtenData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => BtenData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => BtenData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }

    /// Writes the file and returns the hex SHA-256 of its bytes.
    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.encode()?;
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Reads the file, verifying its SHA-256 against `expected_hex`.
    pub fn read_verified(path: &Path, expected_hex: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if sha256_hex(&bytes) != expected_hex {
            return Err(Error::corrupt(path, "content hash mismatch"));
        }
        Self::decode(&bytes, path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let b = Bten::u8(vec![2, 3], vec![0, 1, 2, 3, 4, 5]);
        let bytes = b.encode().unwrap();
        assert_eq!(&bytes[..4], b"BTEN");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &3u32.to_le_bytes());
        assert_eq!(&bytes[15..], &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let p = Path::new("x.ten");
        let mut bytes = Bten::f64(&Tensor::vector(vec![1.0, 2.0])).encode().unwrap();
        assert!(Bten::decode(&bytes[..bytes.len() - 1], p).is_err());
        bytes[0] = b'X';
        assert!(matches!(Bten::decode(&bytes, p), Err(Error::Corrupt { .. })));
    }

    proptest! {
        #[test]
        fn f64_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64).sin() * 1e3).collect();
            let t = Tensor::new(dims, data).unwrap();
            let b = Bten::f64(&t);
            let back = Bten::decode(&b.encode().unwrap(), Path::new("t")).unwrap();
            prop_assert_eq!(back.to_tensor().unwrap(), t);
        }
    }
}
