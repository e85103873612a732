//! Variance-exploding noise schedule, SDE coefficients and annealing factors.
//!
//! Two time axes appear here. `tau` is noising time (0 = data, 1 = noise) and
//! `t = 1 - tau` is reverse/integration time (0 = noise, 1 = data). Public
//! functions take `t` unless the argument is named `tau`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PitaError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaKind {
    #[default]
    VarianceExploding,
}

fn default_sigma_min() -> f64 {
    0.05
}
fn default_sigma_max() -> f64 {
    80.0
}
fn default_rho() -> f64 {
    7.0
}

/// Karras-style ρ-power interpolation between `sigma_min` and `sigma_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub alpha_kind: AlphaKind,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.05,
            sigma_max: 80.0,
            rho: 7.0,
            alpha_kind: AlphaKind::VarianceExploding,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            rho,
            alpha_kind: AlphaKind::VarianceExploding,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max >= self.sigma_min && self.rho > 0.0) {
            return Err(PitaError::Config(format!(
                "bad noise schedule: sigma_min={}, sigma_max={}, rho={}",
                self.sigma_min, self.sigma_max, self.rho
            )));
        }
        Ok(())
    }

    fn lo(&self) -> f64 {
        self.sigma_min.powf(1.0 / self.rho)
    }

    fn span(&self) -> f64 {
        self.sigma_max.powf(1.0 / self.rho) - self.lo()
    }

    pub fn sigma_at(&self, tau: f64) -> f64 {
        (self.lo() + tau * self.span()).powf(self.rho)
    }

    /// dσ/dτ.
    pub fn dsigma_dtau(&self, tau: f64) -> f64 {
        self.rho * (self.lo() + tau * self.span()).powf(self.rho - 1.0) * self.span()
    }

    /// σ at reverse time `t`.
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_at(1.0 - t)
    }

    /// dσ/dt in reverse time; negative since σ shrinks toward the data end.
    pub fn dsigma_dt(&self, t: f64) -> f64 {
        -self.dsigma_dtau(1.0 - t)
    }

    /// Inverse of [`sigma_at`](Self::sigma_at), returning `tau`.
    pub fn tau_of_sigma(&self, sigma: f64) -> f64 {
        if self.span() == 0.0 {
            return 0.0;
        }
        ((sigma.powf(1.0 / self.rho) - self.lo()) / self.span()).clamp(0.0, 1.0)
    }

    /// `(a_t, ζ_t)` of the forward OU-type SDE, read at `tau = 1 - t`.
    pub fn drift_coeffs(&self, t: f64) -> (f64, f64) {
        (0.0, self.zeta2(t).max(0.0).sqrt())
    }

    /// ζ_t² = dσ²/dτ for the variance-exploding case.
    pub fn zeta2(&self, t: f64) -> f64 {
        let tau = 1.0 - t;
        2.0 * self.sigma_at(tau) * self.dsigma_dtau(tau)
    }

    /// `α_τ x + σ_τ ε`; returns the noised rows together with `ε`.
    pub fn perturb<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        tau: f64,
        rng: &mut R,
    ) -> (Array2<f64>, Array2<f64>) {
        let sigma = self.sigma_at(tau);
        let eps = Array2::from_shape_simple_fn(x.raw_dim(), || StandardNormal.sample(rng));
        let xt = &x + &(&eps * sigma);
        (xt, eps)
    }
}

/// Shape of the annealing factor along reverse time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSchedule {
    Constant { gamma: f64 },
    Linear { gamma_start: f64, gamma_end: f64 },
    Sigmoid { gamma_start: f64, gamma_end: f64, sharpness: f64 },
}

impl GammaSchedule {
    pub fn constant(gamma: f64) -> Self {
        GammaSchedule::Constant { gamma }
    }

    pub fn gamma_end(&self) -> f64 {
        match *self {
            GammaSchedule::Constant { gamma } => gamma,
            GammaSchedule::Linear { gamma_end, .. } | GammaSchedule::Sigmoid { gamma_end, .. } => gamma_end,
        }
    }

    /// Same shape, rescaled so that it ends at `end` (start stays where it was
    /// unless it would exceed the end).
    pub fn with_end(&self, end: f64) -> Self {
        match *self {
            GammaSchedule::Constant { .. } => GammaSchedule::Constant { gamma: end },
            GammaSchedule::Linear { gamma_start, .. } => GammaSchedule::Linear {
                gamma_start: gamma_start.min(end),
                gamma_end: end,
            },
            GammaSchedule::Sigmoid {
                gamma_start, sharpness, ..
            } => GammaSchedule::Sigmoid {
                gamma_start: gamma_start.min(end),
                gamma_end: end,
                sharpness,
            },
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, GammaSchedule::Constant { .. })
    }

    // Logistic ramp renormalized to hit exactly 0 at t = 0 and 1 at t = 1.
    fn ramp(k: f64, t: f64) -> (f64, f64) {
        let sig = |u: f64| 1.0 / (1.0 + (-k * (u - 0.5)).exp());
        let (s0, s1) = (sig(0.0), sig(1.0));
        let s = sig(t);
        ((s - s0) / (s1 - s0), k * s * (1.0 - s) / (s1 - s0))
    }

    pub fn gamma_at(&self, t: f64) -> f64 {
        match *self {
            GammaSchedule::Constant { gamma } => gamma,
            GammaSchedule::Linear { gamma_start, gamma_end } => gamma_start + t * (gamma_end - gamma_start),
            GammaSchedule::Sigmoid {
                gamma_start,
                gamma_end,
                sharpness,
            } => gamma_start + (gamma_end - gamma_start) * Self::ramp(sharpness, t).0,
        }
    }

    pub fn dgamma_dt(&self, t: f64) -> f64 {
        match *self {
            GammaSchedule::Constant { .. } => 0.0,
            GammaSchedule::Linear { gamma_start, gamma_end } => gamma_end - gamma_start,
            GammaSchedule::Sigmoid {
                gamma_start,
                gamma_end,
                sharpness,
            } => (gamma_end - gamma_start) * Self::ramp(sharpness, t).1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GammaSchedule::Constant { gamma } => gamma >= 0.0,
            GammaSchedule::Linear { gamma_start, gamma_end } => gamma_start >= 0.0 && gamma_end >= gamma_start,
            GammaSchedule::Sigmoid {
                gamma_start,
                gamma_end,
                sharpness,
            } => gamma_start >= 0.0 && gamma_end >= gamma_start && sharpness > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(PitaError::Config(format!("invalid gamma schedule {self:?}")))
        }
    }
}

fn default_p_mean() -> f64 {
    -1.2
}
fn default_p_std() -> f64 {
    1.2
}

/// Log-normal sampler of training noise levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSampler {
    #[serde(default = "default_p_mean")]
    pub p_mean: f64,
    #[serde(default = "default_p_std")]
    pub p_std: f64,
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl TimeSampler {
    /// Draws `ln σ ~ N(p_mean, p_std²)`, clamps, and returns `(t, σ)`.
    pub fn sample<R: Rng + ?Sized>(&self, sched: &NoiseSchedule, rng: &mut R) -> (f64, f64) {
        let z: f64 = StandardNormal.sample(rng);
        let sigma = (self.p_mean + self.p_std * z)
            .exp()
            .clamp(sched.sigma_min, sched.sigma_max);
        let tau = sched.tau_of_sigma(sigma);
        (1.0 - tau, sigma)
    }
}

pub fn sample_training_time<R: Rng + ?Sized>(ts: &TimeSampler, sched: &NoiseSchedule, rng: &mut R) -> (f64, f64) {
    ts.sample(sched, rng)
}
