//! Analytic target densities.
//!
//! Every target is an unnormalized Boltzmann density `π(x) ∝ exp(-E(x))`. The
//! annealed density `π^β` is obtained by scaling the energy, so normalizing
//! constants are never needed.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PitaError, Result};

/// Anything that can be queried for an energy and its score.
///
/// `score` is `∇ log π(x) = -∇E(x)` at unit inverse temperature.
pub trait Potential: Sync {
    fn dim(&self) -> usize;

    fn energy(&self, x: &[f64]) -> Result<f64>;

    fn score(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Joint evaluation; counts as a single oracle call.
    fn energy_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.energy(x)?, self.score(x)?))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LjSignConvention {
    /// `(r_m/d)^6 - (r_m/d)^12`, with the well turned into a barrier.
    #[default]
    Inverted,
    /// `(r_m/d)^12 - (r_m/d)^6`, the usual attractive well.
    Standard,
}

fn default_r_m() -> f64 {
    1.0
}
fn default_eps() -> f64 {
    2.0
}
fn default_tau_lj() -> f64 {
    1.0
}
fn default_c_osc() -> f64 {
    1.0
}
fn default_floor() -> f64 {
    1e-8
}

/// Lennard-Jones cluster with harmonic confinement about the center of mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LjParams {
    pub n_particles: usize,
    #[serde(default = "default_r_m")]
    pub r_m: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Scale in the `eps / (2 tau)` prefactor.
    #[serde(default = "default_tau_lj")]
    pub tau_lj: f64,
    #[serde(default = "default_c_osc")]
    pub c_osc: f64,
    #[serde(default, rename = "lj_sign_convention")]
    pub sign_convention: LjSignConvention,
    /// Pair distances below this are reported as degenerate.
    #[serde(default = "default_floor")]
    pub distance_floor: f64,
}

impl LjParams {
    pub fn lj13() -> Self {
        Self {
            n_particles: 13,
            r_m: 1.0,
            eps: 2.0,
            tau_lj: 1.0,
            c_osc: 1.0,
            sign_convention: LjSignConvention::Inverted,
            distance_floor: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(PitaError::Config("LJ needs at least two particles".into()));
        }
        if !(self.r_m > 0.0 && self.eps > 0.0 && self.tau_lj > 0.0 && self.c_osc >= 0.0) {
            return Err(PitaError::Config(format!(
                "LJ parameters out of range: r_m={}, eps={}, tau_lj={}, c_osc={}",
                self.r_m, self.eps, self.tau_lj, self.c_osc
            )));
        }
        Ok(())
    }

    /// Pair term and its derivative with respect to the distance.
    fn pair(&self, d: f64) -> (f64, f64) {
        let s6 = (self.r_m / d).powi(6);
        let s12 = s6 * s6;
        // (r/d)^6 - (r/d)^12 and its d-derivative
        let v = s6 - s12;
        let dv = (-6.0 * s6 + 12.0 * s12) / d;
        match self.sign_convention {
            LjSignConvention::Inverted => (v, dv),
            LjSignConvention::Standard => (-v, -dv),
        }
    }
}

/// Two-dimensional isotropic Gaussian mixture with a shared component width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm2d {
    pub centers: Vec<[f64; 2]>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl Default for Gmm2d {
    fn default() -> Self {
        Self {
            centers: vec![[-2.5, 0.0], [2.5, 0.0]],
            std: 0.5,
            weights: vec![0.5, 0.5],
        }
    }
}

impl Gmm2d {
    pub fn with_weights(weights: Vec<f64>) -> Self {
        Self {
            weights,
            ..Self::default()
        }
    }

    fn log_norm_weights(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| (w / total).ln()).collect()
    }

    /// Index of the nearest component center.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.centers.iter().enumerate() {
            let d = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetDensity {
    GaussianDiag { mean: Vec<f64>, std: Vec<f64> },
    Gmm2d(Gmm2d),
    DoubleWell1d { barrier: f64 },
    LennardJones(LjParams),
}

impl TargetDensity {
    pub fn standard_normal(dim: usize) -> Self {
        TargetDensity::GaussianDiag {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TargetDensity::GaussianDiag { mean, std } => {
                if mean.is_empty() || mean.len() != std.len() || std.iter().any(|s| *s <= 0.0) {
                    return Err(PitaError::Config("bad GaussianDiag parameters".into()));
                }
            }
            TargetDensity::Gmm2d(g) => {
                if g.centers.is_empty()
                    || g.centers.len() != g.weights.len()
                    || g.std <= 0.0
                    || g.weights.iter().any(|w| *w <= 0.0)
                {
                    return Err(PitaError::Config("bad Gmm2d parameters".into()));
                }
            }
            TargetDensity::DoubleWell1d { barrier } => {
                if *barrier <= 0.0 {
                    return Err(PitaError::Config("double-well barrier must be > 0".into()));
                }
            }
            TargetDensity::LennardJones(p) => p.validate()?,
        }
        Ok(())
    }

    /// Number of particles for particle systems, `None` otherwise.
    pub fn n_particles(&self) -> Option<usize> {
        match self {
            TargetDensity::LennardJones(p) => Some(p.n_particles),
            _ => None,
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        let d = Potential::dim(self);
        if x.len() != d {
            return Err(PitaError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `β·E(x)`, the energy of `π^β` up to an additive constant.
    pub fn annealed_energy(&self, beta: f64, x: &[f64]) -> Result<f64> {
        if !(beta > 0.0) {
            return Err(PitaError::InvalidTemperature(beta));
        }
        Ok(beta * self.energy(x)?)
    }

    fn lj_energy_and_score(p: &LjParams, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = p.n_particles;
        let pref = p.eps / (2.0 * p.tau_lj);
        let mut e = 0.0;
        let mut grad = vec![0.0; x.len()];
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = [
                    x[3 * i] - x[3 * j],
                    x[3 * i + 1] - x[3 * j + 1],
                    x[3 * i + 2] - x[3 * j + 2],
                ];
                let d = (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
                if !(d >= p.distance_floor) {
                    return Err(PitaError::DegenerateConfiguration { i, j, distance: d });
                }
                let (v, dv) = p.pair(d);
                // ordered-pair sum counts each unordered pair twice
                e += 2.0 * pref * v;
                let g = 2.0 * pref * dv / d;
                for k in 0..3 {
                    grad[3 * i + k] += g * dx[k];
                    grad[3 * j + k] -= g * dx[k];
                }
            }
        }
        if p.c_osc > 0.0 {
            let com = center_of_mass(x, n);
            let mut osc = 0.0;
            for i in 0..n {
                for k in 0..3 {
                    let r = x[3 * i + k] - com[k];
                    osc += r * r;
                    grad[3 * i + k] += p.c_osc * r;
                }
            }
            e += p.c_osc * 0.5 * osc;
        }
        let score = grad.into_iter().map(|g| -g).collect();
        Ok((e, score))
    }

    fn gmm_energy_and_score(g: &Gmm2d, x: &[f64]) -> (f64, Vec<f64>) {
        let var = g.std * g.std;
        let log_w = g.log_norm_weights();
        let log_norm = -(2.0 * std::f64::consts::PI * var).ln();
        let logs: Vec<f64> = g
            .centers
            .iter()
            .zip(&log_w)
            .map(|(c, lw)| {
                let r2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                lw + log_norm - r2 / (2.0 * var)
            })
            .collect();
        let lse = log_sum_exp(&logs);
        let mut score = vec![0.0; 2];
        for (c, l) in g.centers.iter().zip(&logs) {
            let r = (l - lse).exp();
            score[0] += r * (c[0] - x[0]) / var;
            score[1] += r * (c[1] - x[1]) / var;
        }
        (-lse, score)
    }

    /// Exact i.i.d. samples from `π^β` when they are available in closed form.
    pub fn sample_iid<R: Rng + ?Sized>(&self, beta: f64, n: usize, rng: &mut R) -> Option<Array2<f64>> {
        match self {
            TargetDensity::GaussianDiag { mean, std } => {
                let d = mean.len();
                let scale = 1.0 / beta.sqrt();
                Some(Array2::from_shape_fn((n, d), |(_, j)| {
                    let z: f64 = StandardNormal.sample(rng);
                    mean[j] + std[j] * scale * z
                }))
            }
            TargetDensity::Gmm2d(g) if beta == 1.0 => {
                let total: f64 = g.weights.iter().sum();
                let mut out = Array2::zeros((n, 2));
                for mut row in out.rows_mut() {
                    let u: f64 = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut k = g.weights.len() - 1;
                    for (i, w) in g.weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    for j in 0..2 {
                        let z: f64 = StandardNormal.sample(rng);
                        row[j] = g.centers[k][j] + g.std * z;
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// A reasonable starting state for Markov chains.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            TargetDensity::LennardJones(p) => {
                // jittered cubic lattice, spacing slightly above r_m
                let side = (p.n_particles as f64).cbrt().ceil() as usize;
                let spacing = 1.1 * p.r_m;
                let mut x = Vec::with_capacity(3 * p.n_particles);
                'outer: for a in 0..side {
                    for b in 0..side {
                        for c in 0..side {
                            if x.len() == 3 * p.n_particles {
                                break 'outer;
                            }
                            for v in [a, b, c] {
                                let z: f64 = StandardNormal.sample(rng);
                                x.push(v as f64 * spacing + 0.05 * p.r_m * z);
                            }
                        }
                    }
                }
                remove_com(&mut x, p.n_particles);
                x
            }
            _ => (0..Potential::dim(self))
                .map(|_| StandardNormal.sample(rng))
                .collect(),
        }
    }
}

impl Potential for TargetDensity {
    fn dim(&self) -> usize {
        match self {
            TargetDensity::GaussianDiag { mean, .. } => mean.len(),
            TargetDensity::Gmm2d(_) => 2,
            TargetDensity::DoubleWell1d { .. } => 1,
            TargetDensity::LennardJones(p) => 3 * p.n_particles,
        }
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        Ok(self.energy_and_score(x)?.0)
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.energy_and_score(x)?.1)
    }

    fn energy_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(x)?;
        match self {
            TargetDensity::GaussianDiag { mean, std } => {
                let mut e = 0.0;
                let mut s = Vec::with_capacity(x.len());
                for ((xi, m), sd) in x.iter().zip(mean).zip(std) {
                    let z = (xi - m) / sd;
                    e += 0.5 * z * z;
                    s.push(-z / sd);
                }
                Ok((e, s))
            }
            TargetDensity::Gmm2d(g) => Ok(Self::gmm_energy_and_score(g, x)),
            TargetDensity::DoubleWell1d { barrier } => {
                let u = x[0] * x[0] - 1.0;
                Ok((barrier * u * u, vec![-4.0 * barrier * u * x[0]]))
            }
            TargetDensity::LennardJones(p) => Self::lj_energy_and_score(p, x),
        }
    }
}

/// `½ Σ_i ||x_i - x_COM||²` for a flattened `(n, 3)` configuration.
pub fn harmonic_com_energy(x: &[f64]) -> f64 {
    let n = x.len() / 3;
    if n == 0 {
        return 0.0;
    }
    let com = center_of_mass(x, n);
    x.chunks_exact(3)
        .map(|p| (0..3).map(|k| (p[k] - com[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        * 0.5
}

pub fn center_of_mass(x: &[f64], n: usize) -> [f64; 3] {
    let mut com = [0.0; 3];
    for p in x.chunks_exact(3).take(n) {
        for k in 0..3 {
            com[k] += p[k];
        }
    }
    for c in &mut com {
        *c /= n as f64;
    }
    com
}

pub fn remove_com(x: &mut [f64], n: usize) {
    let com = center_of_mass(x, n);
    for p in x.chunks_exact_mut(3) {
        for k in 0..3 {
            p[k] -= com[k];
        }
    }
}

/// Uniformly distributed rotation matrix from a random unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in &mut q {
            *v = StandardNormal.sample(rng);
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in &mut q {
                *v /= norm;
            }
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn rotate_configuration(x: &mut [f64], rot: &[[f64; 3]; 3]) {
    for p in x.chunks_exact_mut(3) {
        let v = [p[0], p[1], p[2]];
        for (k, row) in rot.iter().enumerate() {
            p[k] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Call counters for a [`CountingPotential`].
#[derive(Debug, Default)]
pub struct CallCounts {
    pub energy: AtomicU64,
    pub score: AtomicU64,
    pub joint: AtomicU64,
}

impl CallCounts {
    pub fn energy_calls(&self) -> u64 {
        self.energy.load(Ordering::Relaxed)
    }
    pub fn score_calls(&self) -> u64 {
        self.score.load(Ordering::Relaxed)
    }
    pub fn joint_calls(&self) -> u64 {
        self.joint.load(Ordering::Relaxed)
    }
    /// Every oracle query, whatever it asked for.
    pub fn total(&self) -> u64 {
        self.energy_calls() + self.score_calls() + self.joint_calls()
    }
}

/// Wraps a potential and counts every query made against it.
pub struct CountingPotential<'a, P: Potential + ?Sized> {
    inner: &'a P,
    counts: &'a CallCounts,
}

impl<'a, P: Potential + ?Sized> CountingPotential<'a, P> {
    pub fn new(inner: &'a P, counts: &'a CallCounts) -> Self {
        Self { inner, counts }
    }
}

impl<P: Potential + ?Sized> Potential for CountingPotential<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        self.counts.energy.fetch_add(1, Ordering::Relaxed);
        self.inner.energy(x)
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.counts.score.fetch_add(1, Ordering::Relaxed);
        self.inner.score(x)
    }

    fn energy_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.counts.joint.fetch_add(1, Ordering::Relaxed);
        self.inner.energy_and_score(x)
    }
}
