//! Batched score and energy fields consumed by the samplers.
//!
//! Both learned networks and closed-form fields implement these traits, so
//! the annealer can be validated against exact marginals.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::heads::{Divergence, NetArch};
use super::mlp::ParamVector;
use crate::error::Result;
use crate::schedule::NoiseSchedule;

/// `s_t(x) ≈ ∇ log p_t(x)` on rows of `x`.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64>;

    /// Score rows together with their divergences. `probe_seed` feeds any
    /// stochastic estimator so results stay reproducible.
    fn score_divergence(&self, x: ArrayView2<f64>, t: f64, probe_seed: u64) -> Result<(Array2<f64>, Vec<f64>)>;
}

/// Time-dependent energy `U_t(x)` on rows of `x`.
pub trait EnergyField: Sync {
    fn dim(&self) -> usize;

    fn energy(&self, x: ArrayView2<f64>, t: f64) -> Vec<f64>;

    /// Energies and `∇ₓU`.
    fn energy_grad(&self, x: ArrayView2<f64>, t: f64) -> (Vec<f64>, Array2<f64>);

    /// `∂U/∂t` in reverse time.
    fn time_derivative(&self, x: ArrayView2<f64>, t: f64) -> Vec<f64>;
}

/// Learned denoiser evaluated as a score.
#[derive(Clone, Debug)]
pub struct NetScore {
    pub arch: NetArch,
    pub params: ParamVector,
    pub beta: f64,
    pub divergence: Divergence,
    pub exact_cap: usize,
}

impl ScoreField for NetScore {
    fn dim(&self) -> usize {
        self.arch.dim()
    }

    fn score(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        self.arch.score(&self.params, x, t, self.beta)
    }

    fn score_divergence(&self, x: ArrayView2<f64>, t: f64, probe_seed: u64) -> Result<(Array2<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        self.arch
            .score_divergence(&self.params, x, t, self.beta, self.divergence, self.exact_cap, &mut rng)
    }
}

/// Learned energy head.
#[derive(Clone, Debug)]
pub struct NetEnergy {
    pub arch: NetArch,
    pub params: ParamVector,
    pub beta: f64,
    /// Step of the central difference used for `∂U/∂t`.
    pub time_h: f64,
}

impl EnergyField for NetEnergy {
    fn dim(&self) -> usize {
        self.arch.dim()
    }

    fn energy(&self, x: ArrayView2<f64>, t: f64) -> Vec<f64> {
        self.arch.energy(&self.params, x, t, self.beta)
    }

    fn energy_grad(&self, x: ArrayView2<f64>, t: f64) -> (Vec<f64>, Array2<f64>) {
        self.arch.energy_grad(&self.params, x, t, self.beta)
    }

    fn time_derivative(&self, x: ArrayView2<f64>, t: f64) -> Vec<f64> {
        self.arch.energy_time_derivative(&self.params, x, t, self.beta, self.time_h)
    }
}

/// Exact diffused marginal of isotropic `N(0, v I)` data under a VE schedule:
/// `p_t = N(0, (v + σ_t²) I)`.
#[derive(Clone, Debug)]
pub struct GaussianField {
    pub dim: usize,
    pub data_var: f64,
    pub schedule: NoiseSchedule,
    /// Constant added to the energy; shifts the gauge without changing
    /// any gradient.
    pub energy_offset: f64,
}

impl GaussianField {
    pub fn new(dim: usize, data_var: f64, schedule: NoiseSchedule) -> Self {
        Self {
            dim,
            data_var,
            schedule,
            energy_offset: 0.0,
        }
    }

    fn var(&self, t: f64) -> f64 {
        self.data_var + self.schedule.sigma(t).powi(2)
    }
}

impl ScoreField for GaussianField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        &x * (-1.0 / self.var(t))
    }

    fn score_divergence(&self, x: ArrayView2<f64>, t: f64, _probe_seed: u64) -> Result<(Array2<f64>, Vec<f64>)> {
        let v = self.var(t);
        Ok((&x * (-1.0 / v), vec![-(self.dim as f64) / v; x.nrows()]))
    }
}

impl EnergyField for GaussianField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: ArrayView2<f64>, t: f64) -> Vec<f64> {
        let v = self.var(t);
        x.rows()
            .into_iter()
            .map(|r| r.dot(&r) / (2.0 * v) + self.energy_offset)
            .collect()
    }

    fn energy_grad(&self, x: ArrayView2<f64>, t: f64) -> (Vec<f64>, Array2<f64>) {
        (self.energy(x, t), &x * (1.0 / self.var(t)))
    }

    fn time_derivative(&self, x: ArrayView2<f64>, t: f64) -> Vec<f64> {
        let v = self.var(t);
        let s = self.schedule.sigma(t);
        let dv = 2.0 * s * self.schedule.dsigma_dt(t);
        x.rows().into_iter().map(|r| -r.dot(&r) * dv / (2.0 * v * v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gaussian_time_derivative_matches_fd() {
        let f = GaussianField::new(2, 1.0, NoiseSchedule::default());
        let x = array![[0.4, -1.2]];
        for t in [0.05, 0.5, 0.95] {
            let h = 1e-6;
            let fd = (f.energy(x.view(), t + h)[0] - f.energy(x.view(), t - h)[0]) / (2.0 * h);
            let a = f.time_derivative(x.view(), t)[0];
            assert!((a - fd).abs() <= 1e-5 * fd.abs().max(1e-12), "{a} vs {fd}");
        }
    }

    #[test]
    fn gaussian_score_is_negative_energy_gradient() {
        let f = GaussianField::new(3, 0.5, NoiseSchedule::default());
        let x = array![[0.4, -1.2, 2.0]];
        let s = f.score(x.view(), 0.3);
        let (_, g) = f.energy_grad(x.view(), 0.3);
        assert_eq!(s, -g);
    }
}
