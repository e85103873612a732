//! Sample buffers and their binary file format.
//!
//! Layout, all little-endian:
//!
//! | field                | type      |
//! |----------------------|-----------|
//! | magic `PITABUF\0`    | 8 bytes   |
//! | version              | u32       |
//! | beta                 | f64       |
//! | dim                  | u64       |
//! | count                | u64       |
//! | provenance           | u8 (0 = mcmc, 1 = annealed inference) |
//! | flags                | u8 (bit 0 energies, bit 1 scores, bit 2 low ESS) |
//! | energy_evals_spent   | u64       |
//! | samples              | count × dim f64, row-major |
//! | energies (optional)  | count f64 |
//! | scores (optional)    | count × dim f64 |

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PitaError, Result};

const MAGIC: &[u8; 8] = b"PITABUF\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 8 + 1 + 1 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mcmc,
    AnnealedInference,
}

/// Configurations at one inverse temperature.
///
/// Cached energies and scores are those of the untempered target, `E(x)`
/// and `∇ log π(x)`; multiply by `beta` for `π^β`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBuffer {
    pub beta: f64,
    pub samples: Array2<f64>,
    pub cached_energies: Option<Vec<f64>>,
    pub cached_scores: Option<Array2<f64>>,
    pub provenance: Provenance,
    pub energy_evals_spent: u64,
    pub low_ess: bool,
}

impl SampleBuffer {
    pub fn new(beta: f64, samples: Array2<f64>, provenance: Provenance) -> Self {
        Self {
            beta,
            samples,
            cached_energies: None,
            cached_scores: None,
            provenance,
            energy_evals_spent: 0,
            low_ess: false,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(PitaError::Config("buffer contains non-finite samples".into()));
        }
        if let Some(e) = &self.cached_energies {
            if e.len() != self.len() {
                return Err(PitaError::DimensionMismatch {
                    expected: self.len(),
                    got: e.len(),
                });
            }
        }
        if let Some(s) = &self.cached_scores {
            if s.dim() != self.samples.dim() {
                return Err(PitaError::DimensionMismatch {
                    expected: self.len(),
                    got: s.nrows(),
                });
            }
        }
        Ok(())
    }

    /// Stacks buffers of equal dimension. The result takes the first
    /// buffer's β and provenance; caches survive only if every part has them.
    pub fn concat(parts: &[&SampleBuffer]) -> Result<SampleBuffer> {
        let first = parts.first().ok_or(PitaError::EmptyBuffer)?;
        let views: Vec<_> = parts.iter().map(|b| b.samples.view()).collect();
        let samples = ndarray::concatenate(Axis(0), &views).map_err(|_| PitaError::DimensionMismatch {
            expected: first.dim(),
            got: parts.iter().map(|b| b.dim()).find(|d| *d != first.dim()).unwrap_or(0),
        })?;
        let energies = if parts.iter().all(|b| b.cached_energies.is_some()) {
            Some(parts.iter().flat_map(|b| b.cached_energies.clone().unwrap()).collect())
        } else {
            None
        };
        let scores = if parts.iter().all(|b| b.cached_scores.is_some()) {
            let v: Vec<_> = parts.iter().map(|b| b.cached_scores.as_ref().unwrap().view()).collect();
            Some(ndarray::concatenate(Axis(0), &v).expect("same shape as samples"))
        } else {
            None
        };
        Ok(SampleBuffer {
            beta: first.beta,
            samples,
            cached_energies: energies,
            cached_scores: scores,
            provenance: first.provenance,
            energy_evals_spent: parts.iter().map(|b| b.energy_evals_spent).sum(),
            low_ess: parts.iter().any(|b| b.low_ess),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let d = self.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * (2 * d + 1));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.beta.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.push(match self.provenance {
            Provenance::Mcmc => 0,
            Provenance::AnnealedInference => 1,
        });
        let mut flags = 0u8;
        if self.cached_energies.is_some() {
            flags |= 1;
        }
        if self.cached_scores.is_some() {
            flags |= 2;
        }
        if self.low_ess {
            flags |= 4;
        }
        out.push(flags);
        out.extend_from_slice(&self.energy_evals_spent.to_le_bytes());
        for v in self.samples.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(e) = &self.cached_energies {
            for v in e {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(s) = &self.cached_scores {
            for v in s.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| PitaError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a sample buffer"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(8) != VERSION {
            return Err(bad("unsupported buffer version"));
        }
        let beta = f64_at(12);
        let d = u64_at(20) as usize;
        let n = u64_at(28) as usize;
        let provenance = match bytes[36] {
            0 => Provenance::Mcmc,
            1 => Provenance::AnnealedInference,
            _ => return Err(bad("unknown provenance")),
        };
        let flags = bytes[37];
        let spent = u64_at(38);
        let mut expected = HEADER_LEN + 8 * n * d;
        if flags & 1 != 0 {
            expected += 8 * n;
        }
        if flags & 2 != 0 {
            expected += 8 * n * d;
        }
        if bytes.len() != expected {
            return Err(bad("truncated or oversized buffer"));
        }
        let mut off = HEADER_LEN;
        let mut read_block = |len: usize| {
            let v: Vec<f64> = (0..len).map(|i| f64_at(off + 8 * i)).collect();
            off += 8 * len;
            v
        };
        let samples = Array2::from_shape_vec((n, d), read_block(n * d)).expect("sized above");
        let cached_energies = (flags & 1 != 0).then(|| read_block(n));
        let cached_scores =
            (flags & 2 != 0).then(|| Array2::from_shape_vec((n, d), read_block(n * d)).expect("sized above"));
        let buf = SampleBuffer {
            beta,
            samples,
            cached_energies,
            cached_scores,
            provenance,
            energy_evals_spent: spent,
            low_ess: flags & 4 != 0,
        };
        buf.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> SampleBuffer {
        SampleBuffer {
            beta: 0.25,
            samples: array![[0.1, -2.0], [1.0 / 3.0, 7.5]],
            cached_energies: Some(vec![1.5, -0.25]),
            cached_scores: Some(array![[0.0, 1.0], [2.0, 3.0]]),
            provenance: Provenance::AnnealedInference,
            energy_evals_spent: 42,
            low_ess: true,
        }
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let b = sample();
        b.save(&p).unwrap();
        assert_eq!(SampleBuffer::load(&p).unwrap(), b);
        let mut plain = SampleBuffer::new(1.0, array![[1.0], [2.0], [3.0]], Provenance::Mcmc);
        plain.energy_evals_spent = 3;
        plain.save(&p).unwrap();
        assert_eq!(SampleBuffer::load(&p).unwrap(), plain);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let bytes = sample().to_bytes();
        let p = Path::new("mem");
        assert!(SampleBuffer::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(SampleBuffer::from_bytes(b"hello world, not a buffer at all!!!!!!!!!!!!", p).is_err());
    }

    #[test]
    fn concat_keeps_caches_only_when_all_have_them() {
        let a = sample();
        let mut b = sample();
        let c = SampleBuffer::concat(&[&a, &b]).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.energy_evals_spent, 84);
        assert!(c.cached_scores.is_some());
        b.cached_scores = None;
        assert!(SampleBuffer::concat(&[&a, &b]).unwrap().cached_scores.is_none());
    }
}
