//! Inference-time annealing with a weighted reverse SDE.
//!
//! Particles start from the variance-exploding prior, follow
//! `dx = (-a x + ζ²/2 (s - γ ξ ∇U)) dt + ζ √ξ dW` in reverse time, and carry
//! log-weights whose increments correct for the mismatch between the
//! transported density and `exp(-γ U_t)`. Optional bridging at `t = 1`
//! reweights towards the true tempered target.

use log::warn;
use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energies::Potential;
use crate::error::{PitaError, Result};
use crate::mcmc::{Provenance, SampleBuffer};
use crate::metrics::log_ess;
use crate::mix_seed;
use crate::netkernel::{Divergence, EnergyField, ScoreField};
use crate::schedule::{GammaSchedule, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResamplePolicy {
    EveryStep,
    EssBelow { threshold: f64 },
    /// Only the final resampling that turns weights into an unweighted
    /// buffer.
    Never,
}

impl Default for ResamplePolicy {
    fn default() -> Self {
        ResamplePolicy::EssBelow { threshold: 0.5 }
    }
}

/// Which vector field the geometric-averaging dynamics transport along.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricField {
    /// `-a x + ζ²/2 ((1-γ) s - γ x/σ²)`: the Gaussian part moves with its own
    /// probability-flow velocity.
    #[default]
    DiffusionScaled,
    /// `-a x + (1-γ) ζ²/2 s - γ x/σ²`, the unscaled Gaussian term.
    Unscaled,
}

fn default_particles() -> usize {
    1024
}
fn default_steps() -> usize {
    500
}
fn default_xi() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}
fn default_floor() -> f64 {
    0.01
}
fn default_chunk() -> usize {
    128
}
fn default_divergence() -> Divergence {
    Divergence::Exact
}
fn default_true() -> bool {
    true
}
fn default_gamma() -> GammaSchedule {
    GammaSchedule::constant(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    /// Churn ξ.
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// γ schedule; its end value is reset to `β_{i+1}/β_i` on a ladder.
    #[serde(default = "default_gamma")]
    pub gamma: GammaSchedule,
    #[serde(default)]
    pub resample: ResamplePolicy,
    #[serde(default = "default_divergence")]
    pub divergence: Divergence,
    #[serde(default = "default_true")]
    pub bridge_endpoint: bool,
    #[serde(default)]
    pub seed: u64,
    /// `c_s` in `s_t(x) = c_s · score_net(x, t)`.
    #[serde(default = "default_one")]
    pub score_scale: f64,
    /// Final normalized ESS below this raises the low-ESS flag.
    #[serde(default = "default_floor")]
    pub ess_floor: f64,
    /// Rows per parallel evaluation task; fixed so results do not depend on
    /// the thread count.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default)]
    pub geometric_field: GeometricField,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            n_particles: default_particles(),
            n_steps: default_steps(),
            xi: 1.0,
            gamma: default_gamma(),
            resample: ResamplePolicy::default(),
            divergence: Divergence::Exact,
            bridge_endpoint: true,
            seed: 0,
            score_scale: 1.0,
            ess_floor: 0.01,
            chunk_size: default_chunk(),
            geometric_field: GeometricField::default(),
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(PitaError::Config("need at least two particles".into()));
        }
        if self.n_steps == 0 || self.chunk_size == 0 || self.xi < 0.0 {
            return Err(PitaError::Config("n_steps and chunk_size must be > 0, xi >= 0".into()));
        }
        if let ResamplePolicy::EssBelow { threshold } = self.resample {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(PitaError::Config(format!("ESS threshold {threshold} not in (0, 1]")));
            }
        }
        self.gamma.validate()
    }
}

/// Particle states with log-weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    pub states: Array2<f64>,
    pub log_weights: Vec<f64>,
    pub t: f64,
    pub resample_count: usize,
    /// Normalized ESS after each step.
    pub ess_trace: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(states: Array2<f64>) -> Self {
        let k = states.nrows();
        Self {
            states,
            log_weights: vec![0.0; k],
            t: 0.0,
            resample_count: 0,
            ess_trace: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn normalized_ess(&self) -> f64 {
        log_ess(&self.log_weights).exp()
    }

    /// Self-normalized weights, stabilized by the largest log-weight.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let m = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(PitaError::DegenerateWeights);
        }
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / z).collect())
    }

    /// Systematic resampling; returns the selected ancestor indices.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<usize>> {
        let w = self.normalized_weights()?;
        let idx = systematic_indices(&w, rng);
        self.states = self.states.select(Axis(0), &idx);
        self.log_weights = vec![0.0; idx.len()];
        self.resample_count += 1;
        Ok(idx)
    }
}

/// Low-variance resampling: one uniform offset, `K` evenly spaced pointers.
pub fn systematic_indices<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Vec<usize> {
    let k = w.len();
    let u0: f64 = rng.random::<f64>() / k as f64;
    let mut out = Vec::with_capacity(k);
    let mut cum = w[0];
    let mut j = 0;
    for i in 0..k {
        let u = u0 + i as f64 / k as f64;
        while u >= cum && j + 1 < k {
            j += 1;
            cum += w[j];
        }
        // skip zero-weight tail entries reached only through roundoff
        while w[j] == 0.0 && j > 0 {
            j -= 1;
        }
        out.push(j);
    }
    out
}

pub fn resample<R: Rng + ?Sized>(ensemble: &ParticleEnsemble, rng: &mut R) -> Result<ParticleEnsemble> {
    let mut e = ensemble.clone();
    e.resample(rng)?;
    e.ess_trace.push(1.0);
    Ok(e)
}

/// `Σ softmax(log w) φ(x)`.
pub fn snis_estimate(ensemble: &ParticleEnsemble, phi: impl Fn(ArrayView1<f64>) -> f64) -> Result<f64> {
    let w = ensemble.normalized_weights()?;
    Ok(ensemble
        .states
        .rows()
        .into_iter()
        .zip(&w)
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, w)| w * phi(x))
        .sum())
}

/// Field values at one time for a batch of particles.
#[derive(Clone, Debug)]
pub struct FieldValues {
    pub score: Array2<f64>,
    pub div: Vec<f64>,
    pub energy: Vec<f64>,
    pub grad_energy: Array2<f64>,
    pub denergy_dt: Vec<f64>,
}

/// Evaluates both fields chunk by chunk in parallel; chunk order fixes the
/// result regardless of thread count.
pub fn evaluate_fields<S, E>(
    score: &S,
    energy: &E,
    x: ArrayView2<f64>,
    t: f64,
    chunk: usize,
    probe_seed: u64,
) -> Result<FieldValues>
where
    S: ScoreField + ?Sized,
    E: EnergyField + ?Sized,
{
    let n = x.nrows();
    let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
    let parts: Vec<Result<FieldValues>> = starts
        .par_iter()
        .enumerate()
        .map(|(ci, &a)| {
            let b = (a + chunk).min(n);
            let xc = x.slice(s![a..b, ..]);
            let (sc, div) = score.score_divergence(xc, t, mix_seed(probe_seed, ci as u64))?;
            let (u, gu) = energy.energy_grad(xc, t);
            let du = energy.time_derivative(xc, t);
            Ok(FieldValues {
                score: sc,
                div,
                energy: u,
                grad_energy: gu,
                denergy_dt: du,
            })
        })
        .collect();
    let mut parts_ok = Vec::with_capacity(parts.len());
    for p in parts {
        parts_ok.push(p?);
    }
    let cat = |f: &dyn Fn(&FieldValues) -> ArrayView2<f64>| {
        let v: Vec<_> = parts_ok.iter().map(f).collect();
        ndarray::concatenate(Axis(0), &v).expect("chunks share width")
    };
    Ok(FieldValues {
        score: cat(&|p| p.score.view()),
        grad_energy: cat(&|p| p.grad_energy.view()),
        div: parts_ok.iter().flat_map(|p| p.div.iter().copied()).collect(),
        energy: parts_ok.iter().flat_map(|p| p.energy.iter().copied()).collect(),
        denergy_dt: parts_ok.iter().flat_map(|p| p.denergy_dt.iter().copied()).collect(),
    })
}

/// Drift `-a x + ζ²/2 (s - γ ξ ∇U)` on rows, given field values.
pub fn drift_from(
    x: ArrayView2<f64>,
    s: ArrayView2<f64>,
    grad_u: ArrayView2<f64>,
    a: f64,
    zeta2: f64,
    gamma: f64,
    xi: f64,
) -> Array2<f64> {
    let mut d = &s - &(&grad_u * (gamma * xi));
    d *= 0.5 * zeta2;
    d.scaled_add(-a, &x);
    d
}

/// Increment `[ζ²/2 ∇·s - γ⟨∇U, -a x + ζ²/2 s⟩ - γ ∂U/∂t - U dγ/dt] dt`.
#[allow(clippy::too_many_arguments)]
pub fn log_weight_increment_from(
    x: ArrayView2<f64>,
    fv: &FieldValues,
    a: f64,
    zeta2: f64,
    gamma: f64,
    dgamma_dt: f64,
    dt: f64,
) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| {
            let xi = x.row(i);
            let s = fv.score.row(i);
            let gu = fv.grad_energy.row(i);
            let mut inner = 0.0;
            for j in 0..xi.len() {
                inner += gu[j] * (-a * xi[j] + 0.5 * zeta2 * s[j]);
            }
            let mut g = 0.5 * zeta2 * fv.div[i] - gamma * inner - gamma * fv.denergy_dt[i];
            if dgamma_dt != 0.0 {
                g -= fv.energy[i] * dgamma_dt;
            }
            g * dt
        })
        .collect()
}

fn scale_score(fv: &mut FieldValues, c: f64) {
    if c != 1.0 {
        fv.score *= c;
        for d in &mut fv.div {
            *d *= c;
        }
    }
}

/// Drift and diffusion coefficient at reverse time `t` for a batch.
#[allow(clippy::too_many_arguments)]
pub fn drift<S, E>(
    score: &S,
    energy: &E,
    schedule: &NoiseSchedule,
    x: ArrayView2<f64>,
    t: f64,
    gamma: f64,
    xi: f64,
    score_scale: f64,
) -> (Array2<f64>, f64)
where
    S: ScoreField + ?Sized,
    E: EnergyField + ?Sized,
{
    let (a, zeta) = schedule.drift_coeffs(t);
    let s = score.score(x, t) * score_scale;
    let (_, gu) = energy.energy_grad(x, t);
    (drift_from(x, s.view(), gu.view(), a, zeta * zeta, gamma, xi), zeta * xi.sqrt())
}

/// Per-particle log-weight increments over a step `dt` starting at `t`.
#[allow(clippy::too_many_arguments)]
pub fn log_weight_increment<S, E>(
    score: &S,
    energy: &E,
    schedule: &NoiseSchedule,
    x: ArrayView2<f64>,
    t: f64,
    dt: f64,
    gamma: f64,
    dgamma_dt: f64,
    score_scale: f64,
    probe_seed: u64,
) -> Result<Vec<f64>>
where
    S: ScoreField + ?Sized,
    E: EnergyField + ?Sized,
{
    let (a, zeta) = schedule.drift_coeffs(t);
    let mut fv = evaluate_fields(score, energy, x, t, x.nrows().max(1), probe_seed)?;
    scale_score(&mut fv, score_scale);
    Ok(log_weight_increment_from(x, &fv, a, zeta * zeta, gamma, dgamma_dt, dt))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub ess: f64,
    pub log_w_mean: f64,
    pub log_w_std: f64,
    pub resampled: bool,
    pub n_nonfinite: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnealDiagnostics {
    pub steps: Vec<StepDiagnostics>,
    /// Log-ESS of the final weights (after bridging, before the last
    /// resampling).
    pub final_log_ess: f64,
    pub resample_count: usize,
    pub low_ess: bool,
    pub energy_evals: u64,
    /// Standard deviation of accumulated log-weights at `t = 1`.
    pub final_log_w_std: f64,
}

#[derive(Clone, Debug)]
pub struct AnnealOutput {
    pub buffer: SampleBuffer,
    /// Weighted ensemble at `t = 1`, before the final resampling.
    pub weighted: ParticleEnsemble,
    pub diagnostics: AnnealDiagnostics,
}

fn log_w_stats(lw: &[f64]) -> (f64, f64) {
    let f: Vec<f64> = lw.iter().copied().filter(|v| v.is_finite()).collect();
    if f.is_empty() {
        return (f64::NEG_INFINITY, 0.0);
    }
    let m = f.iter().sum::<f64>() / f.len() as f64;
    let v = f.iter().map(|x| (x - m).powi(2)).sum::<f64>() / f.len() as f64;
    (m, v.sqrt())
}

/// Marks particles with non-finite state or weight as dead.
fn cull(states: &mut Array2<f64>, lw: &mut [f64]) -> usize {
    let mut n = 0;
    for (i, mut row) in states.rows_mut().into_iter().enumerate() {
        if !lw[i].is_finite() || row.iter().any(|v| !v.is_finite()) {
            if lw[i] != f64::NEG_INFINITY || row.iter().any(|v| !v.is_finite()) {
                n += 1;
            }
            lw[i] = f64::NEG_INFINITY;
            row.fill(0.0);
        }
    }
    n
}

fn prior(schedule: &NoiseSchedule, k: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let s = schedule.sigma(0.0);
    Array2::from_shape_simple_fn((k, d), || {
        let z: f64 = StandardNormal.sample(rng);
        s * z
    })
}

fn add_noise(x: &mut Array2<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    if scale == 0.0 {
        return;
    }
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += scale * z;
    }
}

/// Applies the resampling policy after a step; returns whether it fired.
fn maybe_resample(ens: &mut ParticleEnsemble, policy: ResamplePolicy, rng: &mut ChaCha8Rng) -> Result<bool> {
    let fire = match policy {
        ResamplePolicy::EveryStep => true,
        ResamplePolicy::EssBelow { threshold } => ens.normalized_ess() < threshold,
        ResamplePolicy::Never => false,
    };
    if fire {
        ens.resample(rng)?;
    }
    Ok(fire)
}

/// Target of the final bridging step.
pub struct Bridge<'a> {
    pub target: &'a dyn Potential,
    pub beta: f64,
}

/// Weighted annealing from the VE prior to `t = 1`, then optional bridging
/// and one final resampling into an unweighted buffer tagged `beta_next`.
pub fn annealed_inference<S, E>(
    score: &S,
    energy: &E,
    schedule: &NoiseSchedule,
    bridge: Option<Bridge<'_>>,
    beta_next: f64,
    cfg: &AnnealConfig,
) -> Result<AnnealOutput>
where
    S: ScoreField + ?Sized,
    E: EnergyField + ?Sized,
{
    cfg.validate()?;
    let d = score.dim();
    let k = cfg.n_particles;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0));
    let mut ens = ParticleEnsemble::new(prior(schedule, k, d, &mut rng));
    let dt = 1.0 / cfg.n_steps as f64;
    let mut diag = AnnealDiagnostics::default();

    for step in 0..cfg.n_steps {
        let t = step as f64 * dt;
        let gamma = cfg.gamma.gamma_at(t);
        let dgamma = cfg.gamma.dgamma_dt(t);
        let (a, zeta) = schedule.drift_coeffs(t);
        let zeta2 = zeta * zeta;
        let mut fv = evaluate_fields(
            score,
            energy,
            ens.states.view(),
            t,
            cfg.chunk_size,
            mix_seed(cfg.seed, 1 + step as u64),
        )?;
        scale_score(&mut fv, cfg.score_scale);
        let inc = log_weight_increment_from(ens.states.view(), &fv, a, zeta2, gamma, dgamma, dt);
        let dr = drift_from(ens.states.view(), fv.score.view(), fv.grad_energy.view(), a, zeta2, gamma, cfg.xi);
        for (w, i) in ens.log_weights.iter_mut().zip(&inc) {
            *w += if i.is_finite() { *i } else { f64::NEG_INFINITY };
        }
        ens.states.scaled_add(dt, &dr);
        add_noise(&mut ens.states, zeta * (cfg.xi * dt).sqrt(), &mut rng);
        ens.t = t + dt;
        let bad = cull(&mut ens.states, &mut ens.log_weights);
        if ens.log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(PitaError::DegenerateWeights);
        }
        let (m, sd) = log_w_stats(&ens.log_weights);
        diag.final_log_w_std = sd;
        let resampled = maybe_resample(&mut ens, cfg.resample, &mut rng)?;
        let ess = ens.normalized_ess();
        ens.ess_trace.push(ess);
        diag.steps.push(StepDiagnostics {
            t: ens.t,
            ess,
            log_w_mean: m,
            log_w_std: sd,
            resampled,
            n_nonfinite: bad,
        });
    }
    ens.t = 1.0;

    let mut energies = None;
    let mut scores = None;
    if cfg.bridge_endpoint {
        let b = bridge.ok_or_else(|| PitaError::Config("bridging requested without a target".into()))?;
        let gamma_end = cfg.gamma.gamma_at(1.0);
        let u1 = chunked_energy(energy, ens.states.view(), 1.0, cfg.chunk_size);
        let rows: Vec<Option<Result<(f64, Vec<f64>)>>> = (0..k)
            .into_par_iter()
            .map(|i| {
                if ens.log_weights[i] == f64::NEG_INFINITY {
                    None
                } else {
                    Some(b.target.energy_and_score(ens.states.row(i).as_slice().expect("row-major")))
                }
            })
            .collect();
        let mut e_all = vec![f64::NAN; k];
        let mut s_all = Array2::from_elem((k, d), f64::NAN);
        for (i, r) in rows.into_iter().enumerate() {
            let Some(r) = r else { continue };
            diag.energy_evals += 1;
            match r {
                Ok((e, s)) if e.is_finite() => {
                    e_all[i] = e;
                    s_all.row_mut(i).assign(&ArrayView1::from(&s));
                    ens.log_weights[i] += -b.beta * e + gamma_end * u1[i];
                }
                Ok(_) | Err(PitaError::DegenerateConfiguration { .. }) => {
                    ens.log_weights[i] = f64::NEG_INFINITY;
                }
                Err(e) => return Err(e),
            }
            if !ens.log_weights[i].is_finite() {
                ens.log_weights[i] = f64::NEG_INFINITY;
            }
        }
        if ens.log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(PitaError::DegenerateWeights);
        }
        energies = Some(e_all);
        scores = Some(s_all);
    }

    finish(ens, energies, scores, beta_next, cfg, diag, &mut rng)
}

fn chunked_energy<E: EnergyField + ?Sized>(energy: &E, x: ArrayView2<f64>, t: f64, chunk: usize) -> Vec<f64> {
    let n = x.nrows();
    let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
    let parts: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&a| energy.energy(x.slice(s![a..(a + chunk).min(n), ..]), t))
        .collect();
    parts.concat()
}

fn finish(
    mut ens: ParticleEnsemble,
    energies: Option<Vec<f64>>,
    scores: Option<Array2<f64>>,
    beta_next: f64,
    cfg: &AnnealConfig,
    mut diag: AnnealDiagnostics,
    rng: &mut ChaCha8Rng,
) -> Result<AnnealOutput> {
    diag.final_log_ess = log_ess(&ens.log_weights);
    let (_, sd) = log_w_stats(&ens.log_weights);
    diag.final_log_w_std = sd;
    let weighted = ens.clone();
    let idx = ens.resample(rng)?;
    diag.resample_count = ens.resample_count;
    diag.low_ess = diag.final_log_ess.exp() < cfg.ess_floor;
    if diag.low_ess {
        warn!(
            "final normalized ESS {:.4} below floor {}",
            diag.final_log_ess.exp(),
            cfg.ess_floor
        );
    }
    let buffer = SampleBuffer {
        beta: beta_next,
        samples: ens.states,
        cached_energies: energies.map(|e| idx.iter().map(|&i| e[i]).collect()),
        cached_scores: scores.map(|s| s.select(Axis(0), &idx)),
        provenance: Provenance::AnnealedInference,
        energy_evals_spent: diag.energy_evals,
        low_ess: diag.low_ess,
    };
    Ok(AnnealOutput {
        buffer,
        weighted,
        diagnostics: diag,
    })
}

/// Weighted dynamics towards `q_t ∝ exp(-(1-γ) U_t) N(x; 0, σ_t²)^γ` for a
/// fixed mixing weight `γ`. `γ = 0` coincides with [`annealed_inference`]
/// at unit annealing factor.
pub fn geometric_inference<S, E>(
    score: &S,
    energy: &E,
    schedule: &NoiseSchedule,
    gamma_mix: f64,
    beta_tag: f64,
    cfg: &AnnealConfig,
) -> Result<AnnealOutput>
where
    S: ScoreField + ?Sized,
    E: EnergyField + ?Sized,
{
    cfg.validate()?;
    let d = score.dim();
    let k = cfg.n_particles;
    let g = gamma_mix;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0));
    let mut ens = ParticleEnsemble::new(prior(schedule, k, d, &mut rng));
    let dt = 1.0 / cfg.n_steps as f64;
    let mut diag = AnnealDiagnostics::default();

    for step in 0..cfg.n_steps {
        let t = step as f64 * dt;
        let (a, zeta) = schedule.drift_coeffs(t);
        let z2 = zeta * zeta;
        let sigma = schedule.sigma(t);
        let s2 = sigma * sigma;
        let dsig = schedule.dsigma_dt(t);
        let mut fv = evaluate_fields(
            score,
            energy,
            ens.states.view(),
            t,
            cfg.chunk_size,
            mix_seed(cfg.seed, 1 + step as u64),
        )?;
        scale_score(&mut fv, cfg.score_scale);
        // Gaussian-part coefficient in the transport velocity
        let c_gauss = match cfg.geometric_field {
            GeometricField::DiffusionScaled => 0.5 * z2 / s2,
            GeometricField::Unscaled => 1.0 / s2,
        };
        let mut drift = Array2::zeros((k, d));
        let mut inc = vec![0.0; k];
        for i in 0..k {
            let x = ens.states.row(i);
            let s = fv.score.row(i);
            let gu = fv.grad_energy.row(i);
            let mut inner = 0.0;
            let mut xx = 0.0;
            for j in 0..d {
                let v = -a * x[j] + (1.0 - g) * 0.5 * z2 * s[j] - g * c_gauss * x[j];
                let grad_log_q = -(1.0 - g) * gu[j] - g * x[j] / s2;
                inner += grad_log_q * v;
                xx += x[j] * x[j];
                drift[[i, j]] = v + cfg.xi * 0.5 * z2 * grad_log_q;
            }
            let div_v = (1.0 - g) * 0.5 * z2 * fv.div[i] - g * c_gauss * d as f64;
            let dlogq_dt = -(1.0 - g) * fv.denergy_dt[i] + g * xx / (s2 * sigma) * dsig;
            inc[i] = (inner + div_v + dlogq_dt) * dt;
        }
        for (w, v) in ens.log_weights.iter_mut().zip(&inc) {
            *w += if v.is_finite() { *v } else { f64::NEG_INFINITY };
        }
        ens.states.scaled_add(dt, &drift);
        add_noise(&mut ens.states, zeta * (cfg.xi * dt).sqrt(), &mut rng);
        ens.t = t + dt;
        let bad = cull(&mut ens.states, &mut ens.log_weights);
        if ens.log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(PitaError::DegenerateWeights);
        }
        let (m, sd) = log_w_stats(&ens.log_weights);
        let resampled = maybe_resample(&mut ens, cfg.resample, &mut rng)?;
        let ess = ens.normalized_ess();
        ens.ess_trace.push(ess);
        diag.steps.push(StepDiagnostics {
            t: ens.t,
            ess,
            log_w_mean: m,
            log_w_std: sd,
            resampled,
            n_nonfinite: bad,
        });
    }
    ens.t = 1.0;
    finish(ens, None, None, beta_tag, cfg, diag, &mut rng)
}

/// Plain Euler–Maruyama of the reverse SDE with the score multiplied by
/// `scale`; no weights.
pub fn simulate_reverse<S: ScoreField + ?Sized>(
    score: &S,
    schedule: &NoiseSchedule,
    n: usize,
    n_steps: usize,
    xi: f64,
    scale: f64,
    chunk: usize,
    seed: u64,
) -> Array2<f64> {
    let d = score.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
    let mut x = prior(schedule, n, d, &mut rng);
    let dt = 1.0 / n_steps as f64;
    for step in 0..n_steps {
        let t = step as f64 * dt;
        let (a, zeta) = schedule.drift_coeffs(t);
        let z2 = zeta * zeta;
        let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
        let parts: Vec<Array2<f64>> = starts
            .par_iter()
            .map(|&lo| score.score(x.slice(s![lo..(lo + chunk).min(n), ..]), t))
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let s = ndarray::concatenate(Axis(0), &views).expect("chunks share width");
        let mut dr = s * (scale * 0.5 * z2 * (1.0 + xi));
        dr.scaled_add(-a, &x);
        x.scaled_add(dt, &dr);
        add_noise(&mut x, zeta * (xi * dt).sqrt(), &mut rng);
    }
    x
}

/// Reverse-SDE sampling for evaluation and baselines.
pub fn reverse_sample<S: ScoreField + ?Sized>(
    score: &S,
    schedule: &NoiseSchedule,
    n: usize,
    n_steps: usize,
    xi: f64,
    seed: u64,
) -> Array2<f64> {
    simulate_reverse(score, schedule, n, n_steps, xi, 1.0, default_chunk(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::TargetDensity;
    use crate::metrics::wasserstein_1d;
    use crate::netkernel::GaussianField;
    use ndarray::array;

    fn gauss() -> GaussianField {
        GaussianField::new(1, 1.0, NoiseSchedule::default())
    }

    fn cfg(k: usize, steps: usize) -> AnnealConfig {
        AnnealConfig {
            n_particles: k,
            n_steps: steps,
            resample: ResamplePolicy::Never,
            bridge_endpoint: false,
            seed: 11,
            ..AnnealConfig::default()
        }
    }

    #[test]
    fn zero_churn_drift_is_probability_flow() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let x = array![[0.7], [-1.2]];
        let (d, diff) = drift(&f, &f, &sch, x.view(), 0.4, 1.0, 0.0, 1.0);
        let z2 = sch.zeta2(0.4);
        let s = f.score(x.view(), 0.4);
        assert_eq!(diff, 0.0);
        for i in 0..2 {
            assert!((d[[i, 0]] - 0.5 * z2 * s[[i, 0]]).abs() < 1e-12 * d[[i, 0]].abs());
        }
    }

    #[test]
    fn consistent_fields_give_reverse_sde_drift() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let x = array![[0.7], [-1.2]];
        let (d, diff) = drift(&f, &f, &sch, x.view(), 0.6, 1.0, 1.0, 1.0);
        let z2 = sch.zeta2(0.6);
        let s = f.score(x.view(), 0.6);
        assert!((diff - z2.sqrt()).abs() < 1e-12);
        for i in 0..2 {
            let want = z2 * s[[i, 0]];
            assert!((d[[i, 0]] - want).abs() < 1e-12 * want.abs());
        }
    }

    struct Linear;
    impl ScoreField for Linear {
        fn dim(&self) -> usize {
            2
        }
        fn score(&self, x: ArrayView2<f64>, _t: f64) -> Array2<f64> {
            x.dot(&array![[-1.0, 0.5], [0.0, -2.0]])
        }
        fn score_divergence(&self, x: ArrayView2<f64>, t: f64, _: u64) -> Result<(Array2<f64>, Vec<f64>)> {
            Ok((self.score(x, t), vec![-3.0; x.nrows()]))
        }
    }
    impl EnergyField for Linear {
        fn dim(&self) -> usize {
            2
        }
        // U = t (x0² + 3 x1²) / 2
        fn energy(&self, x: ArrayView2<f64>, t: f64) -> Vec<f64> {
            x.rows().into_iter().map(|r| t * (r[0] * r[0] + 3.0 * r[1] * r[1]) / 2.0).collect()
        }
        fn energy_grad(&self, x: ArrayView2<f64>, t: f64) -> (Vec<f64>, Array2<f64>) {
            let g = Array2::from_shape_fn(x.raw_dim(), |(i, j)| t * x[[i, j]] * if j == 0 { 1.0 } else { 3.0 });
            (self.energy(x, t), g)
        }
        fn time_derivative(&self, x: ArrayView2<f64>, _t: f64) -> Vec<f64> {
            x.rows().into_iter().map(|r| (r[0] * r[0] + 3.0 * r[1] * r[1]) / 2.0).collect()
        }
    }

    #[test]
    fn increment_matches_hand_evaluation() {
        let sch = NoiseSchedule::default();
        let x = array![[1.0, 2.0]];
        let (t, dt, gamma, dg) = (0.5, 0.01, 1.5, 0.2);
        let inc = log_weight_increment(&Linear, &Linear, &sch, x.view(), t, dt, gamma, dg, 1.0, 0).unwrap()[0];
        let z2 = sch.zeta2(t);
        // s = (-1, 0.5 - 4) = (-1, -3.5); ∇U = 0.5 (1, 6) = (0.5, 3)
        let inner = 0.5 * (0.5 * z2 * -1.0) + 3.0 * (0.5 * z2 * -3.5);
        let u = 0.5 * (1.0 + 12.0) / 2.0;
        let du = (1.0 + 12.0) / 2.0;
        let want = (0.5 * z2 * -3.0 - gamma * inner - gamma * du - u * dg) * dt;
        assert!((inc - want).abs() < 1e-12 * want.abs());
        let no_dg = log_weight_increment(&Linear, &Linear, &sch, x.view(), t, dt, gamma, 0.0, 1.0, 0).unwrap()[0];
        assert!((inc - no_dg + u * dg * dt).abs() < 1e-12 * want.abs());
    }

    #[test]
    fn exact_gaussian_weights_stay_flat() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let out = annealed_inference(&f, &f, &sch, None, 1.0, &cfg(1024, 500)).unwrap();
        assert!(out.diagnostics.final_log_w_std < 0.05);
    }

    #[test]
    fn plain_annealing_recovers_gaussian() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let out = annealed_inference(&f, &f, &sch, None, 1.0, &cfg(4096, 500)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference: Vec<f64> = (0..4096).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w1 = wasserstein_1d(&out.buffer.samples.column(0).to_vec(), &reference, 1).unwrap();
        assert!(w1 < 0.05, "W1 {w1}");
    }

    #[test]
    fn gamma_two_halves_the_variance() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let c = AnnealConfig {
            gamma: GammaSchedule::constant(2.0),
            resample: ResamplePolicy::default(),
            ..cfg(2048, 500)
        };
        let out = annealed_inference(&f, &f, &sch, None, 2.0, &c).unwrap();
        let xs = out.buffer.samples.column(0).to_vec();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        assert!((var - 0.5).abs() < 0.05, "var {var}");
    }

    #[test]
    fn bridging_counts_one_call_per_live_particle_and_caches() {
        use crate::energies::{CallCounts, CountingPotential};
        let f = gauss();
        let sch = NoiseSchedule::default();
        let target = TargetDensity::standard_normal(1);
        let counts = CallCounts::default();
        let ct = CountingPotential::new(&target, &counts);
        let c = AnnealConfig {
            bridge_endpoint: true,
            ..cfg(256, 50)
        };
        let out = annealed_inference(&f, &f, &sch, Some(Bridge { target: &ct, beta: 1.0 }), 1.0, &c).unwrap();
        assert_eq!(counts.total(), 256);
        assert_eq!(out.buffer.energy_evals_spent, 256);
        let e = out.buffer.cached_energies.as_ref().unwrap();
        for (i, row) in out.buffer.samples.rows().into_iter().enumerate() {
            assert_eq!(e[i], target.energy(row.as_slice().unwrap()).unwrap());
        }
    }

    #[test]
    fn energy_offset_leaves_snis_unchanged() {
        let sch = NoiseSchedule::default();
        let f = gauss();
        let mut shifted = gauss();
        shifted.energy_offset = 123.0;
        let c = AnnealConfig {
            gamma: GammaSchedule::constant(1.5),
            ..cfg(512, 100)
        };
        let a = annealed_inference(&f, &f, &sch, None, 1.0, &c).unwrap();
        let b = annealed_inference(&f, &shifted, &sch, None, 1.0, &c).unwrap();
        let ma = snis_estimate(&a.weighted, |x| x[0] * x[0]).unwrap();
        let mb = snis_estimate(&b.weighted, |x| x[0] * x[0]).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn snis_examples() {
        let states = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        let mut e = ParticleEnsemble::new(states);
        assert!((snis_estimate(&e, |x| x[0]).unwrap() - 3.0).abs() < 1e-15);
        e.log_weights = vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.3, f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert_eq!(snis_estimate(&e, |x| x[0]).unwrap(), 3.0);
        e.log_weights = vec![0.1, -2.0, 1.5, 0.0, -0.7];
        let w: Vec<f64> = e.log_weights.iter().map(|l: &f64| l.exp()).collect();
        let z: f64 = w.iter().sum();
        let want: f64 = w.iter().enumerate().map(|(i, wi)| wi * (i + 1) as f64).sum::<f64>() / z;
        assert!((snis_estimate(&e, |x| x[0]).unwrap() - want).abs() < 1e-12);
        e.log_weights = vec![f64::NEG_INFINITY; 5];
        assert!(matches!(snis_estimate(&e, |x| x[0]), Err(PitaError::DegenerateWeights)));
    }

    #[test]
    fn resampling_zero_weights_are_never_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            let idx = systematic_indices(&[0.5, 0.5, 0.0, 0.0], &mut rng);
            for i in idx {
                counts[i] += 1;
            }
        }
        assert_eq!(counts[2] + counts[3], 0);
        assert_eq!(counts[0], 2000);
        assert_eq!(counts[1], 2000);
    }

    #[test]
    fn resample_resets_weights_and_ess() {
        let mut e = ParticleEnsemble::new(array![[1.0], [2.0], [3.0]]);
        e.log_weights = vec![0.0, -1.0, -5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = resample(&e, &mut rng).unwrap();
        assert_eq!(r.log_weights, vec![0.0; 3]);
        assert_eq!(r.normalized_ess(), 1.0);
        assert_eq!(r.resample_count, 1);
    }

    #[test]
    fn reverse_sample_is_seed_deterministic_and_accurate() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let a = reverse_sample(&f, &sch, 64, 100, 0.0, 4);
        let b = reverse_sample(&f, &sch, 64, 100, 0.0, 4);
        assert_eq!(a, b);
        let x = reverse_sample(&f, &sch, 4096, 500, 1.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reference: Vec<f64> = (0..4096).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(wasserstein_1d(&x.column(0).to_vec(), &reference, 1).unwrap() < 0.05);
    }

    #[test]
    fn geometric_zero_mix_equals_annealing() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let c = cfg(256, 100);
        let a = annealed_inference(&f, &f, &sch, None, 1.0, &c).unwrap();
        let g = geometric_inference(&f, &f, &sch, 0.0, 1.0, &c).unwrap();
        for (u, v) in a.buffer.samples.iter().zip(g.buffer.samples.iter()) {
            assert!((u - v).abs() < 1e-9 * u.abs().max(1.0));
        }
    }

    #[test]
    fn geometric_full_mix_collapses_to_sigma_min() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let out = geometric_inference(&f, &f, &sch, 1.0, 1.0, &cfg(4096, 500)).unwrap();
        let xs = out.buffer.samples.column(0).to_vec();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let s2 = sch.sigma(1.0).powi(2);
        assert!((var / s2 - 1.0).abs() < 0.05, "var {var} vs {s2}");
    }

    #[test]
    fn geometric_half_mix_snis_matches_analytic_second_moment() {
        let f = gauss();
        let sch = NoiseSchedule::default();
        let s2 = sch.sigma(1.0).powi(2);
        // q_1 ∝ N(0, 1+σ²)^½ N(0, σ²)^½
        let want = 1.0 / (0.5 / (1.0 + s2) + 0.5 / s2);
        let out = geometric_inference(&f, &f, &sch, 0.5, 1.0, &cfg(4096, 500)).unwrap();
        let m2 = snis_estimate(&out.weighted, |x| x[0] * x[0]).unwrap();
        assert!((m2 / want - 1.0).abs() < 0.05, "{m2} vs {want}");
    }
}
