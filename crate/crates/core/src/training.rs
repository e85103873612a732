//! Losses and the per-temperature training loop.
//!
//! The denoiser `D_t(·; θ)` is fit with denoising and target score matching,
//! the energy head `U_t(·; η)` with distillation of the frozen denoiser and
//! energy pinning at the data end.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, warn};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energies::{random_rotation, rotate_configuration, Potential};
use crate::error::{PitaError, Result};
use crate::mcmc::SampleBuffer;
use crate::netkernel::{
    grad_params, Checkpoint, Divergence, EnergyField, Graph, HeadConfig, MlpSpec, NetArch, NetEnergy, NetScore,
    ParamVector, Preconditioner, Role, ScoreField, Var,
};
use crate::schedule::{NoiseSchedule, TimeSampler};

/// Loss weighting `λ(t)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKind {
    /// `(σ² + σ_d²) / (σ σ_d)²`.
    #[default]
    Karras,
    Unit,
}

/// Anchor of the target-score regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsmAnchor {
    /// `x_t + σ² ∇log π^β(x)`, whose conditional mean is the ideal denoiser.
    #[default]
    Noised,
    /// `x + σ² ∇log π^β(x)`.
    Clean,
}

fn default_batch() -> usize {
    256
}
fn default_steps() -> u64 {
    2000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_ema() -> f64 {
    0.999
}
fn default_one() -> f64 {
    1.0
}
fn default_w_tsm() -> f64 {
    0.01
}
fn default_t_thresh() -> f64 {
    0.8
}
fn default_chunk() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_time_h() -> f64 {
    1e-3
}
fn default_window() -> usize {
    100
}
fn default_frac() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub n_steps: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default = "default_one")]
    pub w_dsm: f64,
    #[serde(default = "default_w_tsm")]
    pub w_tsm: f64,
    #[serde(default = "default_one")]
    pub w_distill: f64,
    #[serde(default = "default_one")]
    pub w_pin: f64,
    /// TSM applies only where reverse time `t ≥ t_thresh`.
    #[serde(default = "default_t_thresh")]
    pub t_thresh: f64,
    #[serde(default)]
    pub lambda_kind: LambdaKind,
    #[serde(default)]
    pub tsm_anchor: TsmAnchor,
    #[serde(default)]
    pub time_sampler: TimeSampler,
    /// Compute target energies and scores once per buffer point.
    #[serde(default = "default_true")]
    pub cache_target: bool,
    /// Random rotations of particle systems in every batch.
    #[serde(default)]
    pub augment_rotations: bool,
    /// Clip each gradient to this global norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Rows per parallel gradient task.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    /// Central-difference step for `∂U/∂t` of the trained energy.
    #[serde(default = "default_time_h")]
    pub time_h: f64,
    /// Write a checkpoint pair every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_window")]
    pub nonfinite_window: usize,
    #[serde(default = "default_frac")]
    pub max_nonfinite_frac: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_dsm, self.w_tsm, self.w_distill, self.w_pin];
        if ws.iter().any(|w| !(*w >= 0.0)) {
            return Err(PitaError::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.t_thresh) {
            return Err(PitaError::Config(format!("t_thresh {} not in [0, 1]", self.t_thresh)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(PitaError::Config(format!("ema_decay {} not in [0, 1)", self.ema_decay)));
        }
        if self.batch_size == 0 || self.chunk_size == 0 || !(self.learning_rate > 0.0) {
            return Err(PitaError::Config("batch_size, chunk_size and learning_rate must be > 0".into()));
        }
        Ok(())
    }

    fn tsm_active(&self) -> bool {
        self.w_tsm > 0.0
    }

    fn pin_active(&self) -> bool {
        self.w_pin > 0.0
    }
}

/// One training minibatch. `t` is reverse time per row.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Array2<f64>,
    pub xt: Array2<f64>,
    pub t: Vec<f64>,
    pub sigma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    fn rows(&self, a: usize, b: usize) -> Batch {
        Batch {
            x: self.x.slice(s![a..b, ..]).to_owned(),
            xt: self.xt.slice(s![a..b, ..]).to_owned(),
            t: self.t[a..b].to_vec(),
            sigma: self.sigma[a..b].to_vec(),
            beta: self.beta[a..b].to_vec(),
        }
    }
}

fn lambdas(kind: LambdaKind, p: &Preconditioner, sigma: &[f64]) -> Vec<f64> {
    match kind {
        LambdaKind::Karras => sigma.iter().map(|s| p.lambda(*s)).collect(),
        LambdaKind::Unit => vec![1.0; sigma.len()],
    }
}

/// `c_i ||a_i - b_i||²` as an `n×1` column.
fn weighted_sq(g: &mut Graph, a: Var, b: Var, c: &[f64]) -> Var {
    let r = g.sub(a, b);
    let n = g.row_sq_norm(r);
    let cv = g.column(c);
    g.mul(n, cv)
}

/// Per-row DSM terms `w λ ||x - D(x_t)||²`.
pub fn dsm_rows(g: &mut Graph, arch: &NetArch, p: &[Var], b: &Batch, kind: LambdaKind, scale: f64) -> Var {
    let rc = arch.row_coeffs(&b.sigma, &b.beta);
    let xt = g.leaf(b.xt.clone());
    let x = g.leaf(b.x.clone());
    let d = arch.denoise_graph(g, p, xt, &rc);
    let c: Vec<f64> = lambdas(kind, &arch.precond, &b.sigma).iter().map(|l| l * scale).collect();
    weighted_sq(g, x, d, &c)
}

/// TSM regression targets for every row (rows below the threshold are
/// still filled; the mask is applied by the loss).
pub fn tsm_targets(b: &Batch, scores: ArrayView2<f64>, anchor: TsmAnchor) -> Array2<f64> {
    let mut y = match anchor {
        TsmAnchor::Noised => b.xt.clone(),
        TsmAnchor::Clean => b.x.clone(),
    };
    for i in 0..b.len() {
        let c = b.sigma[i] * b.sigma[i] * b.beta[i];
        y.row_mut(i).scaled_add(c, &scores.row(i));
    }
    y
}

/// Per-row TSM terms `w 1(t ≥ t_thresh) ||y - D(x_t)||²`; `scores` are the
/// untempered `∇log π(x)`.
#[allow(clippy::too_many_arguments)]
pub fn tsm_rows(
    g: &mut Graph,
    arch: &NetArch,
    p: &[Var],
    b: &Batch,
    scores: ArrayView2<f64>,
    t_thresh: f64,
    anchor: TsmAnchor,
    scale: f64,
) -> Var {
    let rc = arch.row_coeffs(&b.sigma, &b.beta);
    let xt = g.leaf(b.xt.clone());
    let y = g.leaf(tsm_targets(b, scores, anchor));
    let d = arch.denoise_graph(g, p, xt, &rc);
    let c: Vec<f64> = b.t.iter().map(|t| if *t >= t_thresh { scale } else { 0.0 }).collect();
    weighted_sq(g, y, d, &c)
}

/// Per-row distillation terms `w λ ||σ²(-∇U(x_t)) + x_t - D||²` against a
/// fixed denoiser output `d_frozen`.
pub fn distill_rows(
    g: &mut Graph,
    arch: &NetArch,
    p: &[Var],
    b: &Batch,
    d_frozen: ArrayView2<f64>,
    kind: LambdaKind,
    scale: f64,
) -> Var {
    let rc = arch.row_coeffs(&b.sigma, &b.beta);
    let xt = g.leaf(b.xt.clone());
    let u = arch.energy_graph(g, p, xt, &rc);
    let gu = g.grad(u, None, &[xt])[0];
    let s2: Vec<f64> = b.sigma.iter().map(|s| -s * s).collect();
    let s2 = g.column(&s2);
    let pred = g.mul_col(gu, s2);
    let pred = g.add(pred, xt);
    let d = g.leaf(d_frozen.to_owned());
    let c: Vec<f64> = lambdas(kind, &arch.precond, &b.sigma).iter().map(|l| l * scale).collect();
    weighted_sq(g, pred, d, &c)
}

/// Per-row pinning terms `w (U_{t=1}(x) - β E(x))²`.
pub fn pinning_rows(
    g: &mut Graph,
    arch: &NetArch,
    p: &[Var],
    x: ArrayView2<f64>,
    beta: &[f64],
    energies: &[f64],
    scale: f64,
) -> Var {
    let n = x.nrows();
    let sigma = vec![arch.schedule.sigma(1.0); n];
    let rc = arch.row_coeffs(&sigma, beta);
    let xv = g.leaf(x.to_owned());
    let u = arch.energy_graph(g, p, xv, &rc);
    let tgt: Vec<f64> = beta.iter().zip(energies).map(|(b, e)| b * e).collect();
    let tgt = g.column(&tgt);
    let r = g.sub(u, tgt);
    let r2 = g.mul(r, r);
    g.scale(r2, scale)
}

fn mean_of(f: impl FnOnce(&mut Graph, &[Var]) -> Var, params: &ParamVector, n: usize) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.leaves(&mut g);
    let rows = f(&mut g, &p);
    let v = g.value(rows);
    if let Some(i) = v.iter().position(|v| !v.is_finite()) {
        return Err(PitaError::NumericalError {
            batch_index: i,
            what: "non-finite loss".into(),
        });
    }
    Ok(v.sum() / n as f64)
}

/// Batch mean of `λ ||x - D(x_t)||²`.
pub fn dsm_loss(arch: &NetArch, theta: &ParamVector, b: &Batch, kind: LambdaKind) -> Result<f64> {
    mean_of(|g, p| dsm_rows(g, arch, p, b, kind, 1.0), theta, b.len())
}

/// Batch mean of the masked TSM residual. `scores` are untempered.
pub fn tsm_loss_with_scores(
    arch: &NetArch,
    theta: &ParamVector,
    b: &Batch,
    scores: ArrayView2<f64>,
    t_thresh: f64,
    anchor: TsmAnchor,
) -> Result<f64> {
    mean_of(|g, p| tsm_rows(g, arch, p, b, scores, t_thresh, anchor, 1.0), theta, b.len())
}

/// TSM loss querying `target` for the scores at `b.x`.
pub fn tsm_loss<P: Potential + ?Sized>(
    arch: &NetArch,
    theta: &ParamVector,
    target: &P,
    b: &Batch,
    t_thresh: f64,
    anchor: TsmAnchor,
) -> Result<f64> {
    let scores = target_scores(target, b.x.view())?;
    tsm_loss_with_scores(arch, theta, b, scores.view(), t_thresh, anchor)
}

/// Distillation loss of the energy head against the frozen denoiser.
pub fn distill_loss(
    energy: &NetArch,
    eta: &ParamVector,
    denoiser: &NetArch,
    theta: &ParamVector,
    b: &Batch,
    kind: LambdaKind,
) -> Result<f64> {
    let d = denoiser.denoise_rows(theta, b.xt.view(), &denoiser.row_coeffs(&b.sigma, &b.beta));
    mean_of(|g, p| distill_rows(g, energy, p, b, d.view(), kind, 1.0), eta, b.len())
}

/// Pinning loss with target energies supplied.
pub fn pinning_loss_with_energies(
    energy: &NetArch,
    eta: &ParamVector,
    x: ArrayView2<f64>,
    beta: f64,
    energies: &[f64],
) -> Result<f64> {
    let bv = vec![beta; x.nrows()];
    mean_of(|g, p| pinning_rows(g, energy, p, x, &bv, energies, 1.0), eta, x.nrows())
}

/// Pinning loss querying `target` for `E(x)`.
pub fn pinning_loss<P: Potential + ?Sized>(
    energy: &NetArch,
    eta: &ParamVector,
    target: &P,
    beta: f64,
    x: ArrayView2<f64>,
) -> Result<f64> {
    let e = target_energies(target, x)?;
    pinning_loss_with_energies(energy, eta, x, beta, &e)
}

fn target_scores<P: Potential + ?Sized>(target: &P, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, r) in x.rows().into_iter().enumerate() {
        let s = target.score(&r.to_vec())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&s));
    }
    Ok(out)
}

fn target_energies<P: Potential + ?Sized>(target: &P, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    x.rows().into_iter().map(|r| target.energy(&r.to_vec())).collect()
}

/// Denoiser and energy head with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub denoiser: NetArch,
    pub theta: ParamVector,
    pub energy: NetArch,
    pub eta: ParamVector,
}

/// Shape of a fresh model pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: crate::netkernel::Activation,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub center_particles: Option<usize>,
    /// Learnable gauge offset on the energy head.
    #[serde(default = "default_true")]
    pub energy_offset: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Default::default(),
            head: HeadConfig::default(),
            center_particles: None,
            energy_offset: true,
        }
    }
}

impl Models {
    /// Fresh denoiser and energy head on `dim` inputs; both condition on
    /// `[c_noise, β]`.
    pub fn new<R: Rng + ?Sized>(
        spec: &ModelSpec,
        dim: usize,
        schedule: NoiseSchedule,
        sigma_data: f64,
        rng: &mut R,
    ) -> Self {
        let mlp = |offset_head| MlpSpec {
            input_dim: dim,
            cond_dim: 2,
            hidden: spec.hidden.clone(),
            output_dim: dim,
            activation: spec.activation,
            center_particles: spec.center_particles,
            offset_head,
        };
        let arch = |m| NetArch {
            mlp: m,
            precond: Preconditioner { sigma_data },
            schedule: schedule.clone(),
            head: spec.head,
        };
        let denoiser = arch(mlp(false));
        let energy = arch(mlp(spec.energy_offset));
        let theta = denoiser.mlp.init(rng);
        let eta = energy.mlp.init(rng);
        Self {
            denoiser,
            theta,
            energy,
            eta,
        }
    }

    pub fn score_field(&self, beta: f64, divergence: Divergence) -> NetScore {
        NetScore {
            arch: self.denoiser.clone(),
            params: self.theta.clone(),
            beta,
            divergence,
            exact_cap: 64,
        }
    }

    pub fn energy_field(&self, beta: f64, time_h: f64) -> NetEnergy {
        NetEnergy {
            arch: self.energy.clone(),
            params: self.eta.clone(),
            beta,
            time_h,
        }
    }

    pub fn checkpoints(&self, beta: f64, step: u64) -> (Checkpoint, Checkpoint) {
        (
            Checkpoint::new(Role::Denoiser, beta, step, self.denoiser.clone(), self.theta.clone()),
            Checkpoint::new(Role::Energy, beta, step, self.energy.clone(), self.eta.clone()),
        )
    }

    pub fn save(&self, dir: &Path, beta: f64, step: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (d, e) = self.checkpoints(beta, step);
        d.save(&dir.join("denoiser.json"))?;
        e.save(&dir.join("energy.json"))
    }

    pub fn load(dir: &Path) -> Result<(Self, f64, u64)> {
        let d = Checkpoint::load(&dir.join("denoiser.json"))?;
        let e = Checkpoint::load(&dir.join("energy.json"))?;
        if d.role != Role::Denoiser || e.role != Role::Energy {
            return Err(PitaError::Format {
                path: dir.to_path_buf(),
                reason: "checkpoint roles swapped".into(),
            });
        }
        Ok((
            Self {
                denoiser: d.arch,
                theta: d.params,
                energy: e.arch,
                eta: e.params,
            },
            d.beta,
            d.step,
        ))
    }
}

/// Per-coordinate standard deviation averaged over coordinates.
pub fn estimate_sigma_data(samples: ArrayView2<f64>) -> f64 {
    let n = samples.nrows() as f64;
    let mean = samples.mean_axis(Axis(0)).expect("nonempty");
    let var = samples
        .rows()
        .into_iter()
        .map(|r| (&r - &mean).mapv(|v| v * v))
        .fold(ndarray::Array1::zeros(samples.ncols()), |a, b| a + b)
        / n;
    let s = var.mapv(f64::sqrt).mean().unwrap_or(1.0);
    if s.is_finite() && s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Plain Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.values.len() {
            let g = grad.values[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params.values[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// `ema ← d·ema + (1-d)·p`.
pub fn ema_update(ema: &mut ParamVector, p: &ParamVector, decay: f64) {
    for (e, v) in ema.values.iter_mut().zip(&p.values) {
        *e = decay * *e + (1.0 - decay) * v;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub dsm: f64,
    pub tsm: f64,
    pub distill: f64,
    pub pin: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_eta: f64,
    pub wall_time_s: f64,
    pub skipped: bool,
}

/// Where the loop writes its JSON-lines log and periodic checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainIo {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// EMA parameters.
    pub models: Models,
    pub reports: Vec<LossReport>,
    /// Target calls made by this run.
    pub energy_evals: u64,
}

/// Fills missing energy and score caches with one joint call per point.
/// Returns the number of target calls made.
pub fn fill_caches<P: Potential + ?Sized>(target: &P, buffer: &mut SampleBuffer) -> Result<u64> {
    if buffer.cached_energies.is_some() && buffer.cached_scores.is_some() {
        return Ok(0);
    }
    let x = &buffer.samples;
    let rows: Vec<Result<(f64, Vec<f64>)>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| target.energy_and_score(&x.row(i).to_vec()))
        .collect();
    let n = buffer.len();
    let mut e = Vec::with_capacity(n);
    let mut s = Array2::zeros(buffer.samples.raw_dim());
    for (i, r) in rows.into_iter().enumerate() {
        let (ei, si) = r?;
        e.push(ei);
        s.row_mut(i).assign(&ndarray::ArrayView1::from(&si));
    }
    buffer.cached_energies = Some(e);
    buffer.cached_scores = Some(s);
    buffer.energy_evals_spent += n as u64;
    Ok(n as u64)
}

struct Draw {
    batch: Batch,
    scores: Option<Array2<f64>>,
    energies: Option<Vec<f64>>,
}

fn draw_batch(
    buffers: &[&SampleBuffer],
    offsets: &[usize],
    cfg: &TrainingConfig,
    schedule: &NoiseSchedule,
    center: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Draw {
    let total = *offsets.last().unwrap();
    let d = buffers[0].dim();
    let n = cfg.batch_size;
    let mut x = Array2::zeros((n, d));
    let mut beta = Vec::with_capacity(n);
    let have_cache = buffers.iter().all(|b| b.cached_scores.is_some() && b.cached_energies.is_some());
    let mut scores = have_cache.then(|| Array2::zeros((n, d)));
    let mut energies = have_cache.then(|| Vec::with_capacity(n));
    for i in 0..n {
        let k = rng.random_range(0..total);
        let bi = offsets.partition_point(|o| *o <= k) - 1;
        let j = k - offsets[bi];
        let b = buffers[bi];
        x.row_mut(i).assign(&b.samples.row(j));
        beta.push(b.beta);
        if let (Some(s), Some(e)) = (&mut scores, &mut energies) {
            s.row_mut(i).assign(&b.cached_scores.as_ref().unwrap().row(j));
            e.push(b.cached_energies.as_ref().unwrap()[j]);
        }
    }
    if let (true, Some(np)) = (cfg.augment_rotations, center) {
        for i in 0..n {
            let rot = random_rotation(rng);
            let mut r = x.row(i).to_vec();
            rotate_configuration(&mut r, &rot);
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
            if let Some(s) = &mut scores {
                let mut r = s.row(i).to_vec();
                rotate_configuration(&mut r, &rot);
                s.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
            }
            debug_assert_eq!(r.len(), 3 * np);
        }
    }
    let mut t = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for _ in 0..n {
        let (ti, si) = cfg.time_sampler.sample(schedule, rng);
        t.push(ti);
        sigma.push(si);
    }
    let mut xt = x.clone();
    for (i, mut row) in xt.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma[i] * z;
        }
    }
    Draw {
        batch: Batch { x, xt, t, sigma, beta },
        scores,
        energies,
    }
}

/// Sums chunk gradients in chunk order so the result does not depend on
/// scheduling.
fn chunked_grad<F>(params: &ParamVector, n: usize, chunk: usize, f: F) -> Result<(f64, ParamVector)>
where
    F: Fn(&mut Graph, &[Var], usize, usize) -> Var + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Vec<Result<(f64, ParamVector)>> = starts
        .par_iter()
        .map(|&a| {
            let b = (a + chunk).min(n);
            grad_params(params, |g, p| f(g, p, a, b)).map_err(|e| match e {
                PitaError::NumericalError { batch_index, what } => PitaError::NumericalError {
                    batch_index: batch_index + a,
                    what,
                },
                e => e,
            })
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grad.add_scaled(&g, 1.0);
    }
    Ok((loss, grad))
}

fn clip(g: &mut ParamVector, max: Option<f64>) -> f64 {
    let n = g.norm();
    if let Some(m) = max {
        if n > m {
            for v in &mut g.values {
                *v *= m / n;
            }
        }
    }
    n
}

/// Algorithm loop on one buffer; see [`train_on_buffers`].
pub fn train_at_temperature<P: Potential + ?Sized>(
    models: &Models,
    buffer: &mut SampleBuffer,
    target: &P,
    cfg: &TrainingConfig,
    io: &TrainIo,
) -> Result<TrainOutput> {
    train_on_buffers(models, &mut [buffer], target, cfg, io)
}

/// Trains the denoiser with DSM and TSM and the energy head with
/// distillation and pinning on batches drawn uniformly from the union of `buffers`, each
/// row conditioned on its buffer's β. Returns the EMA parameters.
pub fn train_on_buffers<P: Potential + ?Sized>(
    models: &Models,
    buffers: &mut [&mut SampleBuffer],
    target: &P,
    cfg: &TrainingConfig,
    io: &TrainIo,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if buffers.is_empty() || buffers.iter().any(|b| b.is_empty()) {
        return Err(PitaError::EmptyBuffer);
    }
    let mut evals = 0;
    let need_target = cfg.tsm_active() || cfg.pin_active();
    if cfg.cache_target && need_target && cfg.n_steps > 0 {
        for b in buffers.iter_mut() {
            evals += fill_caches(target, b)?;
        }
    }
    let frozen: Vec<&SampleBuffer> = buffers.iter().map(|b| &**b).collect();
    let mut offsets = vec![0];
    for b in &frozen {
        offsets.push(offsets.last().unwrap() + b.len());
    }

    let mut cur = models.clone();
    let mut ema = models.clone();
    let mut opt_t = Adam::new(cur.theta.len(), cfg.learning_rate);
    let mut opt_e = Adam::new(cur.eta.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = match &io.log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut reports = Vec::with_capacity(cfg.n_steps as usize);
    let mut recent_bad: std::collections::VecDeque<bool> = Default::default();
    let start = Instant::now();
    let center = cur.denoiser.mlp.center_particles;
    let schedule = cur.denoiser.schedule.clone();

    for step in 0..cfg.n_steps {
        let draw = draw_batch(&frozen, &offsets, cfg, &schedule, center, &mut rng);
        let b = &draw.batch;
        let n = b.len();
        let inv_n = 1.0 / n as f64;

        let (scores, energies) = if cfg.cache_target || !need_target {
            (draw.scores, draw.energies)
        } else {
            // one score call per row for TSM, one energy call per row for
            // pinning
            let s = if cfg.tsm_active() {
                evals += n as u64;
                Some(target_scores(target, b.x.view())?)
            } else {
                None
            };
            let e = if cfg.pin_active() {
                evals += n as u64;
                Some(target_energies(target, b.x.view())?)
            } else {
                None
            };
            (s, e)
        };

        let result = step_losses(&cur, b, scores.as_ref(), energies.as_deref(), cfg, inv_n);
        let mut rep = LossReport {
            step,
            ..Default::default()
        };
        match result {
            Ok(sl) => {
                let mut gt = sl.grad_theta;
                let mut ge = sl.grad_eta;
                rep.grad_norm_theta = clip(&mut gt, cfg.grad_clip);
                rep.grad_norm_eta = clip(&mut ge, cfg.grad_clip);
                rep.dsm = sl.dsm;
                rep.tsm = sl.tsm;
                rep.distill = sl.distill;
                rep.pin = sl.pin;
                opt_t.step(&mut cur.theta, &gt);
                opt_e.step(&mut cur.eta, &ge);
                ema_update(&mut ema.theta, &cur.theta, cfg.ema_decay);
                ema_update(&mut ema.eta, &cur.eta, cfg.ema_decay);
            }
            Err(PitaError::NumericalError { batch_index, what }) => {
                warn!("step {step}: {what} at batch row {batch_index}; skipped");
                rep.skipped = true;
            }
            Err(e) => return Err(e),
        }
        recent_bad.push_back(rep.skipped);
        if recent_bad.len() > cfg.nonfinite_window {
            recent_bad.pop_front();
        }
        let bad = recent_bad.iter().filter(|b| **b).count();
        if bad as f64 > cfg.max_nonfinite_frac * cfg.nonfinite_window as f64 {
            return Err(PitaError::TrainingAborted(format!(
                "{bad} non-finite steps in the last {} (at step {step})",
                recent_bad.len()
            )));
        }
        rep.wall_time_s = start.elapsed().as_secs_f64();
        if let Some(f) = &mut log {
            writeln!(f, "{}", serde_json::to_string(&rep)?)?;
        }
        if step % 200 == 0 {
            debug!(
                "step {step}: dsm {:.4} tsm {:.4} distill {:.4} pin {:.4}",
                rep.dsm, rep.tsm, rep.distill, rep.pin
            );
        }
        reports.push(rep);
        if let Some(dir) = &io.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                ema.save(&dir.join(format!("step_{:08}", step + 1)), frozen[0].beta, step + 1)?;
            }
        }
    }
    Ok(TrainOutput {
        models: ema,
        reports,
        energy_evals: evals,
    })
}

struct StepLosses {
    dsm: f64,
    tsm: f64,
    distill: f64,
    pin: f64,
    grad_theta: ParamVector,
    grad_eta: ParamVector,
}

fn step_losses(
    m: &Models,
    b: &Batch,
    scores: Option<&Array2<f64>>,
    energies: Option<&[f64]>,
    cfg: &TrainingConfig,
    inv_n: f64,
) -> Result<StepLosses> {
    let n = b.len();
    let ch = cfg.chunk_size;
    let mut out = StepLosses {
        dsm: 0.0,
        tsm: 0.0,
        distill: 0.0,
        pin: 0.0,
        grad_theta: m.theta.zeros_like(),
        grad_eta: m.eta.zeros_like(),
    };
    if cfg.w_dsm > 0.0 {
        let (l, g) = chunked_grad(&m.theta, n, ch, |g, p, a, z| {
            dsm_rows(g, &m.denoiser, p, &b.rows(a, z), cfg.lambda_kind, inv_n)
        })?;
        out.dsm = l;
        out.grad_theta.add_scaled(&g, cfg.w_dsm);
    }
    if cfg.w_tsm > 0.0 {
        let s = scores.expect("scores available when TSM is active");
        let (l, g) = chunked_grad(&m.theta, n, ch, |g, p, a, z| {
            tsm_rows(
                g,
                &m.denoiser,
                p,
                &b.rows(a, z),
                s.slice(s![a..z, ..]),
                cfg.t_thresh,
                cfg.tsm_anchor,
                inv_n,
            )
        })?;
        out.tsm = l;
        out.grad_theta.add_scaled(&g, cfg.w_tsm);
    }
    if cfg.w_distill > 0.0 {
        let d = m
            .denoiser
            .denoise_rows(&m.theta, b.xt.view(), &m.denoiser.row_coeffs(&b.sigma, &b.beta));
        let (l, g) = chunked_grad(&m.eta, n, ch, |g, p, a, z| {
            distill_rows(
                g,
                &m.energy,
                p,
                &b.rows(a, z),
                d.slice(s![a..z, ..]),
                cfg.lambda_kind,
                inv_n,
            )
        })?;
        out.distill = l;
        out.grad_eta.add_scaled(&g, cfg.w_distill);
    }
    if cfg.w_pin > 0.0 {
        let e = energies.expect("energies available when pinning is active");
        let (l, g) = chunked_grad(&m.eta, n, ch, |g, p, a, z| {
            pinning_rows(g, &m.energy, p, b.x.slice(s![a..z, ..]), &b.beta[a..z], &e[a..z], inv_n)
        })?;
        out.pin = l;
        out.grad_eta.add_scaled(&g, cfg.w_pin);
    }
    Ok(out)
}

/// Learned score of a model pair at reverse time `t` for a batch.
pub fn model_score(m: &Models, beta: f64, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
    m.score_field(beta, Divergence::Exact).score(x, t)
}

/// Learned energy of a model pair at reverse time `t` for a batch.
pub fn model_energy(m: &Models, beta: f64, x: ArrayView2<f64>, t: f64) -> Vec<f64> {
    m.energy_field(beta, 1e-3).energy(x, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{CallCounts, CountingPotential, TargetDensity};
    use crate::mcmc::Provenance;
    use ndarray::array;

    fn models(dim: usize, seed: u64) -> Models {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Models::new(
            &ModelSpec {
                hidden: vec![16],
                ..Default::default()
            },
            dim,
            NoiseSchedule::default(),
            1.0,
            &mut rng,
        )
    }

    fn batch(x: Array2<f64>, xt: Array2<f64>, t: f64, sched: &NoiseSchedule) -> Batch {
        let n = x.nrows();
        Batch {
            x,
            xt,
            t: vec![t; n],
            sigma: vec![sched.sigma(t); n],
            beta: vec![1.0; n],
        }
    }

    fn gaussian_buffer(n: usize, seed: u64) -> SampleBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = TargetDensity::standard_normal(1).sample_iid(1.0, n, &mut rng).unwrap();
        SampleBuffer::new(1.0, x, Provenance::Mcmc)
    }

    #[test]
    fn dsm_is_zero_for_perfect_denoiser_and_four_at_distance_two() {
        let m = models(2, 0);
        let sched = NoiseSchedule::default();
        let xt = array![[0.3, -0.4]];
        let b0 = batch(xt.clone(), xt.clone(), 0.5, &sched);
        // a fresh network is c_skip·x_t; make x equal to it
        let d = m.denoiser.denoise(&m.theta, xt.view(), 0.5, 1.0);
        let perfect = Batch { x: d.clone(), ..b0.clone() };
        assert_eq!(dsm_loss(&m.denoiser, &m.theta, &perfect, LambdaKind::Unit).unwrap(), 0.0);
        let off = Batch {
            x: &d + &array![[2.0, 0.0]],
            ..b0
        };
        let l = dsm_loss(&m.denoiser, &m.theta, &off, LambdaKind::Unit).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tsm_masks_and_hand_example() {
        let m = models(1, 0);
        let sched = NoiseSchedule::default();
        let target = TargetDensity::standard_normal(1);
        let x = array![[1.0]];
        let t = sched.tau_of_sigma(0.1);
        let b = batch(x.clone(), x.clone(), 1.0 - t, &sched);
        assert!((b.sigma[0] - 0.1).abs() < 1e-12);
        let d = m.denoiser.denoise(&m.theta, x.view(), b.t[0], 1.0)[[0, 0]];
        let want = (1.0 - 0.01 - d).powi(2);
        for anchor in [TsmAnchor::Noised, TsmAnchor::Clean] {
            let l = tsm_loss(&m.denoiser, &m.theta, &target, &b, 0.0, anchor).unwrap();
            assert!((l - want).abs() < 1e-12);
        }
        let masked = tsm_loss(&m.denoiser, &m.theta, &target, &b, 0.9999999, TsmAnchor::Noised).unwrap();
        assert_eq!(masked, 0.0);
    }

    #[test]
    fn tsm_is_zero_at_its_regression_target() {
        let m = models(1, 0);
        let sched = NoiseSchedule::default();
        let xt = array![[0.7], [-0.2]];
        let d = m.denoiser.denoise(&m.theta, xt.view(), 0.9, 1.0);
        // choose x so that x + σ² ∇log π(x) = D, with ∇log π(x) = -x
        let s2 = sched.sigma(0.9).powi(2);
        let x = &d / (1.0 - s2);
        let b = batch(x.clone(), xt, 0.9, &sched);
        let scores = -&x;
        let l = tsm_loss_with_scores(&m.denoiser, &m.theta, &b, scores.view(), 0.8, TsmAnchor::Clean).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn fresh_heads_are_consistent_so_distill_vanishes() {
        // F ≡ 0: D = c_skip x and U = ||x||²/(2(σ²+σ_d²)) agree exactly
        let m = models(2, 3);
        let sched = NoiseSchedule::default();
        let xt = array![[0.3, -1.4], [2.0, 0.5]];
        let b = batch(xt.clone(), xt, 0.4, &sched);
        let l = distill_loss(&m.energy, &m.eta, &m.denoiser, &m.theta, &b, LambdaKind::Karras).unwrap();
        assert!(l < 1e-20, "{l}");
    }

    #[test]
    fn distill_quadratic_hand_residual() {
        // U with F ≡ 0 against D = c_skip x + c_out·F(...) with nonzero F
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = models(1, 0);
        m.theta = m.denoiser.mlp.init_dense(&mut rng, 0.3);
        let sched = NoiseSchedule::default();
        let xt = array![[0.8]];
        let t = 0.5;
        let b = batch(xt.clone(), xt.clone(), t, &sched);
        let s = sched.sigma(t);
        let d = m.denoiser.denoise(&m.theta, xt.view(), t, 1.0)[[0, 0]];
        let grad_u = 0.8 / (s * s + 1.0);
        let lam = m.energy.precond.lambda(s);
        let want = lam * (s * s * -grad_u + 0.8 - d).powi(2);
        let l = distill_loss(&m.energy, &m.eta, &m.denoiser, &m.theta, &b, LambdaKind::Karras).unwrap();
        assert!((l - want).abs() < 1e-12 * want.max(1.0), "{l} vs {want}");
    }

    #[test]
    fn distill_does_not_touch_denoiser_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = models(2, 0);
        m.theta = m.denoiser.mlp.init_dense(&mut rng, 0.3);
        m.eta = m.energy.mlp.init_dense(&mut rng, 0.3);
        let sched = NoiseSchedule::default();
        let xt = array![[0.3, -1.4], [2.0, 0.5]];
        let b = batch(xt.clone(), xt.clone(), 0.4, &sched);
        let d = m.denoiser.denoise_rows(&m.theta, xt.view(), &m.denoiser.row_coeffs(&b.sigma, &b.beta));
        // gradient w.r.t. θ: the denoiser enters only as a constant
        let (_, g_theta) = grad_params(&m.theta, |g, _p| {
            let eta = m.eta.leaves(g);
            distill_rows(g, &m.energy, &eta, &b, d.view(), LambdaKind::Karras, 1.0)
        })
        .unwrap();
        assert!(g_theta.values.iter().all(|v| *v == 0.0));
        let (_, g_eta) = grad_params(&m.eta, |g, p| {
            distill_rows(g, &m.energy, p, &b, d.view(), LambdaKind::Karras, 1.0)
        })
        .unwrap();
        assert!(g_eta.norm() > 0.0);
    }

    #[test]
    fn pinning_zero_and_offset() {
        let m = models(1, 0);
        let x = array![[0.5], [-1.0]];
        let u = m.energy.energy(&m.eta, x.view(), 1.0, 1.0);
        assert_eq!(pinning_loss_with_energies(&m.energy, &m.eta, x.view(), 1.0, &u).unwrap(), 0.0);
        let shifted: Vec<f64> = u.iter().map(|v| v - 0.75).collect();
        let l = pinning_loss_with_energies(&m.energy, &m.eta, x.view(), 1.0, &shifted).unwrap();
        assert!((l - 0.5625).abs() < 1e-12);
        let u2: Vec<f64> = u.iter().map(|v| v / 2.0).collect();
        assert_eq!(pinning_loss_with_energies(&m.energy, &m.eta, x.view(), 2.0, &u2).unwrap(), 0.0);
    }

    #[test]
    fn chunked_gradients_match_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = models(2, 0);
        m.theta = m.denoiser.mlp.init_dense(&mut rng, 0.3);
        let sched = NoiseSchedule::default();
        let x = Array2::from_shape_fn((37, 2), |_| rng.random::<f64>());
        let b = batch(x.clone(), &x * 1.1, 0.3, &sched);
        let f = |g: &mut Graph, p: &[Var], a, z| dsm_rows(g, &m.denoiser, p, &b.rows(a, z), LambdaKind::Karras, 1.0);
        let (l1, g1) = chunked_grad(&m.theta, 37, 37, f).unwrap();
        let (l2, g2) = chunked_grad(&m.theta, 37, 5, f).unwrap();
        assert!((l1 - l2).abs() < 1e-10 * l1);
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn zero_steps_return_initial_parameters() {
        let m = models(1, 0);
        let mut buf = gaussian_buffer(64, 0);
        let target = TargetDensity::standard_normal(1);
        let cfg = TrainingConfig {
            n_steps: 0,
            ..Default::default()
        };
        let out = train_at_temperature(&m, &mut buf, &target, &cfg, &TrainIo::default()).unwrap();
        assert_eq!(out.models, m);
        assert_eq!(out.energy_evals, 0);
    }

    #[test]
    fn zero_decay_ema_tracks_raw_parameters() {
        let mut e = ParamVector {
            values: vec![1.0, 2.0],
            layout: vec![],
        };
        let p = ParamVector {
            values: vec![-3.0, 0.5],
            layout: vec![],
        };
        ema_update(&mut e, &p, 0.0);
        assert_eq!(e.values, p.values);
    }

    #[test]
    fn uncached_calls_follow_batch_times_steps() {
        let m = models(1, 0);
        let mut buf = gaussian_buffer(64, 0);
        let target = TargetDensity::standard_normal(1);
        let counts = CallCounts::default();
        let ct = CountingPotential::new(&target, &counts);
        let cfg = TrainingConfig {
            n_steps: 3,
            batch_size: 10,
            cache_target: false,
            ..Default::default()
        };
        let out = train_at_temperature(&m, &mut buf, &ct, &cfg, &TrainIo::default()).unwrap();
        assert_eq!(counts.score_calls(), 30);
        assert_eq!(counts.energy_calls(), 30);
        assert_eq!(counts.total(), 60);
        assert_eq!(out.energy_evals, 60);
    }

    #[test]
    fn cached_training_calls_once_per_point() {
        let m = models(1, 0);
        let mut buf = gaussian_buffer(64, 0);
        let target = TargetDensity::standard_normal(1);
        let counts = CallCounts::default();
        let ct = CountingPotential::new(&target, &counts);
        let cfg = TrainingConfig {
            n_steps: 5,
            batch_size: 32,
            ..Default::default()
        };
        let out = train_at_temperature(&m, &mut buf, &ct, &cfg, &TrainIo::default()).unwrap();
        assert_eq!(counts.total(), 64);
        assert_eq!(out.energy_evals, 64);
        // second run reuses the caches
        train_at_temperature(&m, &mut buf, &ct, &cfg, &TrainIo::default()).unwrap();
        assert_eq!(counts.total(), 64);
    }

    #[test]
    fn training_is_seed_deterministic_and_logs_jsonl() {
        let m = models(1, 0);
        let target = TargetDensity::standard_normal(1);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainingConfig {
            n_steps: 20,
            batch_size: 32,
            chunk_size: 8,
            ..Default::default()
        };
        let io = TrainIo {
            log: Some(dir.path().join("loss.jsonl")),
            checkpoint_dir: None,
        };
        let a = train_at_temperature(&m, &mut gaussian_buffer(64, 0), &target, &cfg, &io).unwrap();
        let b = train_at_temperature(&m, &mut gaussian_buffer(64, 0), &target, &cfg, &TrainIo::default()).unwrap();
        assert_eq!(a.models, b.models);
        let text = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 20);
        let r: LossReport = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(r.step, 19);
    }

    #[test]
    fn linear_denoiser_learns_posterior_mean_coefficient() {
        // D(x_t) = c x_t on N(0,1) data at fixed σ: optimum c = 1/(1+σ²)
        let sigma = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = 0.0f64;
        let mut opt = Adam::new(1, 1e-2);
        for _ in 0..3000 {
            let mut grad = 0.0;
            for _ in 0..64 {
                let x: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                let xt = x + sigma * e;
                grad += 2.0 * (c * xt - x) * xt / 64.0;
            }
            let mut p = ParamVector {
                values: vec![c],
                layout: vec![],
            };
            opt.step(
                &mut p,
                &ParamVector {
                    values: vec![grad],
                    layout: vec![],
                },
            );
            c = p.values[0];
        }
        let want = 1.0 / (1.0 + sigma * sigma);
        assert!((c / want - 1.0).abs() < 0.05, "{c} vs {want}");
    }

    #[test]
    fn gaussian_training_matches_analytic_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let buf0 = gaussian_buffer(4096, 1);
        let sd = estimate_sigma_data(buf0.samples.view());
        let m = Models::new(
            &ModelSpec {
                hidden: vec![32, 32],
                ..Default::default()
            },
            1,
            NoiseSchedule::default(),
            sd,
            &mut rng,
        );
        let target = TargetDensity::standard_normal(1);
        let cfg = TrainingConfig {
            n_steps: 2000,
            batch_size: 128,
            ..Default::default()
        };
        let mut buf = buf0;
        let out = train_at_temperature(&m, &mut buf, &target, &cfg, &TrainIo::default()).unwrap();
        let grid = Array2::from_shape_fn((61, 1), |(i, _)| -3.0 + 0.1 * i as f64);
        let s = model_score(&out.models, 1.0, grid.view(), 1.0);
        let smin2 = NoiseSchedule::default().sigma(1.0).powi(2);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..61 {
            let want = -grid[[i, 0]] / (1.0 + smin2);
            num += (s[[i, 0]] - want).powi(2);
            den += want * want;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.1, "relative L2 {rel}");
    }

    #[test]
    fn pinning_recovers_gaussian_offset_and_curvature() {
        // energy head trained by pinning alone on β·E for E = x²/2 + 3
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = models(1, 7);
        let x = Array2::from_shape_fn((512, 1), |_| 3.0 * (rng.random::<f64>() - 0.5) * 2.0);
        let e: Vec<f64> = x.column(0).iter().map(|v| v * v / 2.0 + 3.0).collect();
        let beta = 0.5;
        let mut eta = m.eta.clone();
        let mut opt = Adam::new(eta.len(), 1e-2);
        let bv = vec![beta; 512];
        for _ in 0..1500 {
            let (_, g) = grad_params(&eta, |g, p| pinning_rows(g, &m.energy, p, x.view(), &bv, &e, 1.0 / 512.0)).unwrap();
            opt.step(&mut eta, &g);
        }
        // least-squares oracle: a x² + c with a = β/2, c = 3β
        let probe = array![[0.0], [1.0], [2.0]];
        let u = m.energy.energy(&eta, probe.view(), 1.0, beta);
        let c = u[0];
        let a = (u[2] - u[0]) / 4.0;
        assert!((c / 1.5 - 1.0).abs() < 0.05, "offset {c}");
        assert!((a / 0.25 - 1.0).abs() < 0.05, "curvature {a}");
    }
}
