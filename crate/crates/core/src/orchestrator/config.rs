//! Run configuration, parsed from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annealer::AnnealConfig;
use crate::energies::TargetDensity;
use crate::error::{PitaError, Result};
use crate::mcmc::ChainConfig;
use crate::schedule::NoiseSchedule;
use crate::training::{ModelSpec, TrainingConfig};

/// What to do when an annealed buffer comes back with a low ESS.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LowEssPolicy {
    Halt,
    /// Rerun with `factor` times more particles, up to `max_retries` times.
    Retry { factor: usize, max_retries: u32 },
    /// Keep the buffer; it carries the low-ESS flag.
    #[default]
    Accept,
}

/// How models are trained across rungs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Fine-tune on the newest buffer only, warm-started from the previous
    /// rung.
    #[default]
    Sequential,
    /// One β-conditioned model trained on every buffer seen so far.
    Conditioned,
}

/// `n_rungs` inverse temperatures with a constant ratio from `beta_start`
/// to `beta_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricLadder {
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_rungs: usize,
}

fn default_n_reference() -> usize {
    100_000
}
fn default_cap() -> f64 {
    crate::metrics::DEFAULT_ENERGY_CAP
}
fn default_bins() -> usize {
    100
}
fn default_w2_n() -> usize {
    512
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Size of the i.i.d. reference set when the target admits one.
    #[serde(default = "default_n_reference")]
    pub n_reference: usize,
    #[serde(default = "default_cap")]
    pub energy_cap: f64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Points per side for the assignment-based W2 (≤ 2048).
    #[serde(default = "default_w2_n")]
    pub geometric_w2_n: usize,
    /// Long MALA run used as reference where no exact sampler exists.
    #[serde(default)]
    pub reference_mcmc: Option<ChainConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_reference: default_n_reference(),
            energy_cap: default_cap(),
            histogram_bins: default_bins(),
            geometric_w2_n: default_w2_n(),
            reference_mcmc: None,
        }
    }
}

/// Per-rung overrides, by rung index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RungOverride {
    pub rung: usize,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub anneal: Option<AnnealConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    pub target: TargetDensity,
    /// Explicit ascending ladder `β_0 < β_1 < …`.
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
    #[serde(default)]
    pub geometric_ladder: Option<GeometricLadder>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub model: ModelSpec,
    /// Data collection at `β_0`.
    pub mcmc: ChainConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub anneal: AnnealConfig,
    #[serde(default)]
    pub rungs: Vec<RungOverride>,
    #[serde(default)]
    pub training_mode: TrainingMode,
    #[serde(default)]
    pub low_ess: LowEssPolicy,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl LadderConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: LadderConfig = toml::from_str(text).map_err(|e| PitaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The resolved ladder.
    pub fn betas(&self) -> Result<Vec<f64>> {
        match (&self.betas, &self.geometric_ladder) {
            (Some(b), None) => Ok(b.clone()),
            (None, Some(g)) => {
                if g.n_rungs == 0 || !(g.beta_start > 0.0) || !(g.beta_end > 0.0) {
                    return Err(PitaError::Config("bad geometric ladder".into()));
                }
                if g.n_rungs == 1 {
                    return Ok(vec![g.beta_start]);
                }
                let r = (g.beta_end / g.beta_start).powf(1.0 / (g.n_rungs - 1) as f64);
                let mut v: Vec<f64> = (0..g.n_rungs).map(|i| g.beta_start * r.powi(i as i32)).collect();
                v[g.n_rungs - 1] = g.beta_end;
                Ok(v)
            }
            _ => Err(PitaError::Config(
                "give exactly one of `betas` and `geometric_ladder`".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.schedule.validate()?;
        self.mcmc.validate()?;
        self.training.validate()?;
        self.anneal.validate()?;
        let b = self.betas()?;
        if b.is_empty() {
            return Err(PitaError::Config("empty ladder".into()));
        }
        if let Some(x) = b.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
            return Err(PitaError::InvalidTemperature(*x));
        }
        if b.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PitaError::Config(format!("ladder must be strictly increasing: {b:?}")));
        }
        for r in &self.rungs {
            if r.rung >= b.len() {
                return Err(PitaError::Config(format!("override for missing rung {}", r.rung)));
            }
            if let Some(t) = &r.training {
                t.validate()?;
            }
            if let Some(a) = &r.anneal {
                a.validate()?;
            }
        }
        if let LowEssPolicy::Retry { factor, .. } = self.low_ess {
            if factor < 2 {
                return Err(PitaError::Config("retry factor must be >= 2".into()));
            }
        }
        if self.eval.geometric_w2_n > crate::metrics::ASSIGNMENT_CAP {
            return Err(PitaError::SizeCapExceeded {
                n: self.eval.geometric_w2_n,
                cap: crate::metrics::ASSIGNMENT_CAP,
            });
        }
        Ok(())
    }

    pub fn training_for(&self, rung: usize) -> TrainingConfig {
        self.rungs
            .iter()
            .find(|r| r.rung == rung)
            .and_then(|r| r.training.clone())
            .unwrap_or_else(|| self.training.clone())
    }

    /// Annealing settings for the transition into `rung`.
    pub fn anneal_for(&self, rung: usize) -> AnnealConfig {
        self.rungs
            .iter()
            .find(|r| r.rung == rung)
            .and_then(|r| r.anneal.clone())
            .unwrap_or_else(|| self.anneal.clone())
    }
}
