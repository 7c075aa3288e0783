//! `FVEC` feature files: magic, u32 row count, u32 dim, then rows of
//! little-endian f32.

use crate::error::{Error, Result};
use std::path::Path;

pub const FVEC_MAGIC: &[u8; 4] = b"FVEC";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape {
                op: "feature_matrix",
                left: vec![rows, dim],
                right: vec![data.len()],
            });
        }
        Ok(FeatureMatrix { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(FVEC_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        };
        if bytes.len() < 12 || &bytes[..4] != FVEC_MAGIC {
            return Err(bad("missing FVEC header"));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * rows * dim {
            return Err(bad("payload length does not match rows × dim"));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FeatureMatrix { rows, dim, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"FVEC");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[12..16], &1.0f32.to_le_bytes());
        assert_eq!(FeatureMatrix::from_bytes(&b, Path::new("x")).unwrap(), m);
    }

    #[test]
    fn truncated_rejected() {
        let m = FeatureMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = m.to_bytes();
        assert!(FeatureMatrix::from_bytes(&b[..b.len() - 1], Path::new("x")).is_err());
        assert!(FeatureMatrix::from_bytes(b"NOPE", Path::new("x")).is_err());
    }
}
