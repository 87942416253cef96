//! `SOEM` manifold files and their JSON summary.
//!
//! ```text
//! 0    4        magic "SOEM"
//! 4    4        version (u32, = 1)
//! 8    4        d (u32)
//! 12   4        k (u32)
//! 16   4        sample count N (u32)
//! 20   8        energy fraction (f64)
//! 28   8·d      mean
//! …    8·k      eigenvalues, covariance scale, descending
//! …    8·d·k    basis, row-major d × k
//! ```
//!
//! Values are little-endian `f64`, so manifolds round-trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::manifold::BiasManifold;

pub const MAGIC: &[u8; 4] = b"SOEM";
pub const VERSION: u32 = 1;

pub fn encode_manifold(m: &BiasManifold) -> Result<Vec<u8>> {
    let d = m.dim();
    let k = m.rank();
    if m.basis.rows() != d || m.eigenvalues.len() != k {
        return Err(Error::invalid("manifold fields have inconsistent shapes"));
    }
    let u32_of = |x: usize| {
        u32::try_from(x).map_err(|_| Error::invalid(format!("{x} does not fit in 32 bits")))
    };
    let mut out = Vec::with_capacity(28 + 8 * (d + k + d * k));
    out.extend_from_slice(MAGIC);
    for field in [VERSION, u32_of(d)?, u32_of(k)?, u32_of(m.sample_count)?] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    out.extend_from_slice(&m.energy_fraction.to_le_bytes());
    for x in m.mean.iter().chain(&m.eigenvalues).chain(m.basis.as_slice()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_manifold(buf: &[u8]) -> Result<BiasManifold> {
    let truncated = || Error::Format("truncated manifold file".into());
    if buf.len() < 28 {
        return Err(truncated());
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a SOEM manifold".into()));
    }
    let word = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]);
    let version = word(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (d, k, n) = (word(8) as usize, word(12) as usize, word(16) as usize);
    if d == 0 {
        return Err(Error::Format("manifold dimension is zero".into()));
    }
    let count = d
        .checked_mul(k)
        .and_then(|dk| dk.checked_add(d + k))
        .ok_or_else(|| Error::Format("manifold size overflows".into()))?;
    let expected = count.checked_mul(8).and_then(|b| b.checked_add(28)).ok_or_else(truncated)?;
    if buf.len() < expected {
        return Err(truncated());
    }
    if buf.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes after manifold", buf.len() - expected)));
    }
    let float = |i: usize| {
        let mut b = [0u8; 8];
        b.copy_from_slice(&buf[i..i + 8]);
        f64::from_le_bytes(b)
    };
    let values: Vec<f64> = (0..count).map(|i| float(28 + 8 * i)).collect();
    let basis = Matrix::new(d, k, values[d + k..].to_vec())
        .map_err(|e| Error::Format(format!("invalid basis: {e}")))?;
    Ok(BiasManifold {
        mean: values[..d].to_vec(),
        basis,
        eigenvalues: values[d..d + k].to_vec(),
        sample_count: n,
        energy_fraction: float(20),
    })
}

pub fn write_manifold(m: &BiasManifold, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_manifold(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_manifold(path: impl AsRef<Path>) -> Result<BiasManifold> {
    let path = path.as_ref();
    decode_manifold(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Human-readable description of a manifold, without the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSummary {
    pub dim: usize,
    pub rank: usize,
    pub sample_count: usize,
    pub eigenvalues: Vec<f64>,
    pub energy_fraction: f64,
    pub mean_norm: f64,
}

impl From<&BiasManifold> for ManifoldSummary {
    fn from(m: &BiasManifold) -> Self {
        Self {
            dim: m.dim(),
            rank: m.rank(),
            sample_count: m.sample_count,
            eigenvalues: m.eigenvalues.clone(),
            energy_fraction: m.energy_fraction,
            mean_norm: crate::linalg::norm(&m.mean),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{estimate_manifold, Aggregation, MCSampleSet};

    fn sample() -> BiasManifold {
        let set = MCSampleSet::new(
            vec![
                vec![1.0, 0.3, -2.0, 0.1],
                vec![-0.5, 1.2, 0.7, 0.0],
                vec![0.25, -0.75, 1.5, 3.0],
            ],
            Aggregation::MeanPool,
            0.7,
        )
        .unwrap();
        estimate_manifold(&set, 0.9, 4).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample();
        assert_eq!(decode_manifold(&encode_manifold(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn malformed() {
        let good = encode_manifold(&sample()).unwrap();
        assert!(matches!(decode_manifold(&good[..good.len() - 3]), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[3] = b'T';
        assert!(matches!(decode_manifold(&bad), Err(Error::Format(_))));
        let mut v = good;
        v[4] = 9;
        assert!(matches!(decode_manifold(&v), Err(Error::UnsupportedVersion(9))));
    }
}
