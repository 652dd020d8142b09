//! Region feature grids and their binary file format.
//!
//! Layout: `b"CYCF"`, `u16` version (1), `u32` region count, `u32` feature
//! dimension, then `regions * dim` little-endian `f64` values, row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CYCF";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 4 + 4;

/// `regions × dim` matrix of image region features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    regions: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(regions: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if regions == 0 || dim == 0 {
            return Err(Error::input(format!("feature grid must be non-empty, got {regions}x{dim}")));
        }
        if values.len() != regions * dim {
            return Err(Error::dim("feature grid", &[regions, dim], &[values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("feature value {i} is not finite")));
        }
        Ok(FeatureGrid { regions, dim, values })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn region(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.regions, self.dim, self.values.clone()).expect("grid shape is consistent")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.regions as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| Error::Format {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fmt(0, "bad magic, expected CYCF"));
        }
        if bytes.len() < HEADER {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fmt(4, &format!("unsupported version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (regions, dim) = (u32_at(6), u32_at(10));
        let count = regions
            .checked_mul(dim)
            .ok_or_else(|| fmt(6, "region count times dimension overflows"))?;
        let expected = HEADER + 8 * count;
        if bytes.len() < expected {
            return Err(fmt(
                bytes.len(),
                &format!("truncated payload: {} of {} values present", (bytes.len() - HEADER) / 8, count),
            ));
        }
        if bytes.len() > expected {
            return Err(fmt(expected, "trailing bytes after payload"));
        }
        let values = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureGrid::new(regions, dim, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_payload_reports_offset() {
        let g = FeatureGrid::new(4, 2, vec![0.5; 8]).unwrap();
        let mut bytes = g.to_bytes();
        bytes.truncate(bytes.len() - 8);
        match FeatureGrid::from_bytes(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, HEADER + 7 * 8);
                assert!(message.contains("7 of 8"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_grid_loads_as_zeros() {
        let g = FeatureGrid::new(3, 5, vec![0.0; 15]).unwrap();
        let back = FeatureGrid::from_bytes(&g.to_bytes()).unwrap();
        assert!(back.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_magic_and_non_finite() {
        assert!(matches!(
            FeatureGrid::from_bytes(b"NOPE\x01\x00"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = FeatureGrid::new(1, 1, vec![1.0]).unwrap().to_bytes();
        bytes[HEADER..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(FeatureGrid::from_bytes(&bytes), Err(Error::Numeric(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.cycf");
        let g = FeatureGrid::new(2, 3, vec![1.0, -2.0, 3.25, 1e-300, 7.0, -0.0]).unwrap();
        g.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CYCF");
        assert_eq!(bytes.len(), HEADER + 48);
        let back = FeatureGrid::load(&p).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(l in 1usize..6, d in 1usize..6, seed in proptest::collection::vec(-1e6f64..1e6, 36)) {
            let values = seed[..l * d].to_vec();
            let g = FeatureGrid::new(l, d, values).unwrap();
            prop_assert_eq!(FeatureGrid::from_bytes(&g.to_bytes()).unwrap(), g);
        }
    }
}
