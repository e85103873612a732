//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "pita-checkpoint",
//!   "version": 1,
//!   "role": "denoiser" | "energy",
//!   "beta": 0.25,
//!   "step": 4000,
//!   "arch": { "mlp": {...}, "precond": {...}, "schedule": {...}, "head": {...} },
//!   "params": { "values": [...], "layout": [{"name", "rows", "cols"}, ...] }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed back exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::heads::NetArch;
use super::mlp::ParamVector;
use crate::error::{PitaError, Result};

pub const CHECKPOINT_FORMAT: &str = "pita-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Denoiser,
    Energy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub beta: f64,
    pub step: u64,
    pub arch: NetArch,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new(role: Role, beta: f64, step: u64, arch: NetArch, params: ParamVector) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            role,
            beta,
            step,
            arch,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| PitaError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(PitaError::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        if !ck.params.layout_is_consistent() || ck.params.layout != ck.arch.mlp.layout() {
            return Err(PitaError::Format {
                path: path.to_path_buf(),
                reason: "parameter layout does not match architecture".into(),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netkernel::heads::{HeadConfig, Preconditioner};
    use crate::netkernel::mlp::{Activation, MlpSpec};
    use crate::schedule::NoiseSchedule;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_evaluate_is_bit_identical() {
        let arch = NetArch {
            mlp: MlpSpec {
                input_dim: 2,
                cond_dim: 2,
                hidden: vec![7],
                output_dim: 2,
                activation: Activation::Tanh,
                center_particles: None,
                offset_head: true,
            },
            precond: Preconditioner { sigma_data: 0.123456789 },
            schedule: NoiseSchedule::default(),
            head: HeadConfig::default(),
        };
        let params = arch.mlp.init_dense(&mut ChaCha8Rng::seed_from_u64(4), 1.0 / 3.0);
        let ck = Checkpoint::new(Role::Energy, 0.25, 17, arch, params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params.values), bits(&ck.params.values));
        let x = array![[0.3, -0.2]];
        let a = ck.arch.energy(&ck.params, x.view(), 0.4, 1.0);
        let b = back.arch.energy(&back.params, x.view(), 0.4, 1.0);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn rejects_mismatched_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format\":\"pita-checkpoint\",\"version\":1}").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(PitaError::Format { .. })));
    }
}
