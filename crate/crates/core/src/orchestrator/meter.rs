//! Energy-evaluation accounting by phase.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::energies::Potential;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Mcmc,
    Training,
    Bridging,
    Evaluation,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Mcmc, Phase::Training, Phase::Bridging, Phase::Evaluation];

    fn index(self) -> usize {
        self as usize
    }
}

/// Monotone per-phase counters of target queries. A joint energy-and-score
/// query counts once.
#[derive(Debug, Default)]
pub struct EnergyMeter {
    counts: [AtomicU64; 4],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterSnapshot {
    pub mcmc: u64,
    pub training: u64,
    pub bridging: u64,
    pub evaluation: u64,
    pub total: u64,
}

impl EnergyMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snapshot(s: &MeterSnapshot) -> Self {
        let m = Self::new();
        m.add(Phase::Mcmc, s.mcmc);
        m.add(Phase::Training, s.training);
        m.add(Phase::Bridging, s.bridging);
        m.add(Phase::Evaluation, s.evaluation);
        m
    }

    pub fn add(&self, phase: Phase, n: u64) {
        self.counts[phase.index()].fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self, phase: Phase) -> u64 {
        self.counts[phase.index()].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        Phase::ALL.iter().map(|p| self.get(*p)).sum()
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        MeterSnapshot {
            mcmc: self.get(Phase::Mcmc),
            training: self.get(Phase::Training),
            bridging: self.get(Phase::Bridging),
            evaluation: self.get(Phase::Evaluation),
            total: self.total(),
        }
    }

    /// A view of `target` whose every query is charged to `phase`.
    pub fn metered<'a, P: Potential + ?Sized>(&'a self, target: &'a P, phase: Phase) -> MeteredTarget<'a, P> {
        MeteredTarget {
            inner: target,
            meter: self,
            phase,
        }
    }
}

pub struct MeteredTarget<'a, P: Potential + ?Sized> {
    inner: &'a P,
    meter: &'a EnergyMeter,
    phase: Phase,
}

impl<P: Potential + ?Sized> Potential for MeteredTarget<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        self.meter.add(self.phase, 1);
        self.inner.energy(x)
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.meter.add(self.phase, 1);
        self.inner.score(x)
    }

    fn energy_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.meter.add(self.phase, 1);
        self.inner.energy_and_score(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::TargetDensity;

    #[test]
    fn phases_are_counted_separately() {
        let t = TargetDensity::standard_normal(2);
        let m = EnergyMeter::new();
        let a = m.metered(&t, Phase::Mcmc);
        let b = m.metered(&t, Phase::Bridging);
        a.energy(&[0.0, 1.0]).unwrap();
        a.energy_and_score(&[0.0, 1.0]).unwrap();
        b.score(&[0.0, 1.0]).unwrap();
        let s = m.snapshot();
        assert_eq!((s.mcmc, s.bridging, s.training, s.total), (2, 1, 0, 3));
        assert_eq!(EnergyMeter::from_snapshot(&s).snapshot(), s);
    }
}
