//! `FTEN` portable float tensor files.
//!
//! Layout (little-endian): magic `FTEN`, `u32` version (1), `u32` ndims,
//! `u64` dims[ndims], then `product(dims)` IEEE-754 `f32` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FloatMatrix, FloatVector};

pub const MAGIC: [u8; 4] = *b"FTEN";
pub const VERSION: u32 = 1;

/// An n-dimensional `f32` tensor as stored in an `FTEN` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::dims("Tensor::new", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &FloatMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn from_vector(v: &FloatVector) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.data().to_vec(),
        }
    }

    /// Interprets the tensor as a matrix; 1-D tensors become a single row.
    pub fn to_matrix(&self) -> Result<FloatMatrix> {
        match self.dims.as_slice() {
            [n] => FloatMatrix::new(1, *n, self.data.clone()),
            [r, c] => FloatMatrix::new(*r, *c, self.data.clone()),
            other => Err(Error::MalformedTensor(format!(
                "expected 1 or 2 dims, found {}",
                other.len()
            ))),
        }
    }

    /// Flattens the tensor into a vector; only 1-D or single-row tensors qualify.
    pub fn to_vector(&self) -> Result<FloatVector> {
        match self.dims.as_slice() {
            [_] | [1, _] => Ok(FloatVector::new(self.data.clone())),
            other => Err(Error::MalformedTensor(format!(
                "expected a vector, found dims {other:?}"
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let ndims = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndims.min(16));
        for _ in 0..ndims {
            dims.push(
                usize::try_from(r.u64()?).map_err(|_| {
                    Error::MalformedTensor("dimension does not fit in memory".into())
                })?,
            );
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::MalformedTensor("element count overflows".into()))?;
        let payload = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::MalformedTensor("payload size overflows".into()))?,
        )?;
        if r.pos != bytes.len() {
            return Err(Error::MalformedTensor(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated("FTEN payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"FTEN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[28..32].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 36);
        assert_eq!(Tensor::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = t.to_bytes();
        assert!(matches!(
            Tensor::from_bytes(&b[..b.len() - 1]),
            Err(Error::Truncated(_))
        ));
        b[0] = b'X';
        assert!(matches!(
            Tensor::from_bytes(&b),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ften");
        let t = Tensor::new(vec![2, 2, 1], vec![0.5, 1.5, -0.0, 7.0]).unwrap();
        t.write(&p).unwrap();
        assert_eq!(Tensor::read(&p).unwrap(), t);
    }
}
