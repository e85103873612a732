//! The progressive ladder: sample, train and evaluate each rung, persisting
//! after every phase so an interrupted run picks up where it stopped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LadderConfig, LowEssPolicy, TrainingMode};
use super::meter::{EnergyMeter, MeterSnapshot, Phase};
use crate::annealer::{annealed_inference, AnnealConfig, AnnealDiagnostics, Bridge};
use crate::energies::{Potential, TargetDensity};
use crate::error::{PitaError, Result};
use crate::mcmc::{collect_buffer, ChainConfig, ChainReport, SampleBuffer};
use crate::metrics::{self, Histogram, MetricReport};
use crate::training::{estimate_sigma_data, train_on_buffers, Models, TrainIo, TrainingConfig};
use crate::{mix_seed, write_atomic};

const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";
const MANIFEST_VERSION: u32 = 1;

/// The three persisted steps of every rung.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RungPhase {
    Sample,
    Train,
    Eval,
}

impl RungPhase {
    const ORDER: [RungPhase; 3] = [RungPhase::Sample, RungPhase::Train, RungPhase::Eval];

    fn stream(self, rung: usize) -> u64 {
        rung as u64 * 16 + self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseId {
    pub rung: usize,
    pub phase: RungPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: LadderConfig,
    pub completed: Vec<PhaseId>,
    pub meter: MeterSnapshot,
    pub finished: bool,
}

impl Manifest {
    fn new(config: LadderConfig) -> Self {
        Self {
            version: MANIFEST_VERSION,
            config,
            completed: Vec::new(),
            meter: MeterSnapshot::default(),
            finished: false,
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let corrupt = |reason: String| PitaError::CorruptManifest {
            path: path.clone(),
            reason,
        };
        let text = fs::read_to_string(&path).map_err(|e| corrupt(e.to_string()))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(corrupt(format!("unsupported version {}", m.version)));
        }
        m.config.validate().map_err(|e| corrupt(e.to_string()))?;
        let n = m.config.betas()?.len();
        let expected = (0..n).flat_map(|r| RungPhase::ORDER.map(|phase| PhaseId { rung: r, phase }));
        if m.completed.iter().zip(expected).any(|(a, b)| *a != b) || m.completed.len() > 3 * n {
            return Err(corrupt("completed phases out of order".into()));
        }
        Ok(m)
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        write_atomic(&run_dir.join(MANIFEST), &serde_json::to_vec_pretty(self)?)
    }

    fn is_done(&self, id: PhaseId) -> bool {
        self.completed.contains(&id)
    }
}

/// Exclusive claim on a run directory, released on drop.
///
/// A lock left behind by a dead process is taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    pid == std::process::id() || Path::new(&format!("/proc/{pid}")).exists()
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(LOCK);
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if pid_alive(pid) => return Err(PitaError::Locked(run_dir.to_path_buf())),
                        _ => {
                            warn!("removing stale lock {}", path.display());
                            fs::remove_file(&path)?;
                        }
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Knobs that do not change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Return after this many phases have run in this invocation, leaving
    /// the run resumable. Used to test interruption.
    pub stop_after_phases: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct LadderOutput {
    /// Buffer of the last completed sampling phase.
    pub final_buffer: Option<SampleBuffer>,
    pub reports: Vec<MetricReport>,
    pub meter: MeterSnapshot,
    pub finished: bool,
}

pub fn rung_dir(run_dir: &Path, rung: usize) -> PathBuf {
    run_dir.join(format!("rung_{rung:02}"))
}

fn buffer_path(run_dir: &Path, rung: usize) -> PathBuf {
    rung_dir(run_dir, rung).join("buffer.bin")
}

fn checkpoint_dir(run_dir: &Path, rung: usize) -> PathBuf {
    rung_dir(run_dir, rung).join("checkpoints")
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Summary of how a rung's buffer was produced, kept next to the buffer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub beta: f64,
    pub final_log_ess: Option<f64>,
    pub resample_count: usize,
    pub low_ess: bool,
    pub retries: u32,
    pub n_particles: usize,
    pub mcmc_acceptance: Option<f64>,
}

/// MALA data collection at `beta`. Chain seeds derive from `seed`.
pub fn sample_mcmc<P: Potential + ?Sized>(
    target: &P,
    layout: &TargetDensity,
    beta: f64,
    chain: &ChainConfig,
    seed: u64,
) -> Result<(SampleBuffer, ChainReport)> {
    let cfg = ChainConfig {
        seed,
        ..chain.clone()
    };
    collect_buffer(target, layout, beta, &cfg, None)
}

/// Anneals from the models trained at `beta_prev` to `beta_next`, applying
/// the low-ESS policy. `bridge_target` is queried only for bridging.
#[allow(clippy::too_many_arguments)]
pub fn anneal_rung(
    models: &Models,
    schedule: &crate::schedule::NoiseSchedule,
    bridge_target: &dyn Potential,
    beta_prev: f64,
    beta_next: f64,
    anneal: &AnnealConfig,
    policy: LowEssPolicy,
    seed: u64,
) -> Result<(SampleBuffer, AnnealDiagnostics, SampleSummary)> {
    let mut cfg = AnnealConfig {
        gamma: anneal.gamma.with_end(beta_next / beta_prev),
        seed,
        ..anneal.clone()
    };
    let score = models.score_field(beta_prev, cfg.divergence);
    let energy = models.energy_field(beta_prev, 1e-3);
    let mut retries = 0;
    loop {
        let bridge = cfg.bridge_endpoint.then_some(Bridge {
            target: bridge_target,
            beta: beta_next,
        });
        let out = annealed_inference(&score, &energy, schedule, bridge, beta_next, &cfg)?;
        let d = out.diagnostics;
        let summary = SampleSummary {
            beta: beta_next,
            final_log_ess: Some(d.final_log_ess),
            resample_count: d.resample_count,
            low_ess: d.low_ess,
            retries,
            n_particles: cfg.n_particles,
            mcmc_acceptance: None,
        };
        if !d.low_ess {
            return Ok((out.buffer, d, summary));
        }
        match policy {
            LowEssPolicy::Accept => return Ok((out.buffer, d, summary)),
            LowEssPolicy::Halt => {
                return Err(PitaError::LowEss {
                    ess: d.final_log_ess.exp(),
                    floor: cfg.ess_floor,
                })
            }
            LowEssPolicy::Retry { factor, max_retries } => {
                if retries >= max_retries {
                    warn!("ESS still below floor after {retries} retries; keeping flagged buffer");
                    return Ok((out.buffer, d, summary));
                }
                retries += 1;
                cfg.n_particles *= factor;
                cfg.seed = mix_seed(seed, 1000 + retries as u64);
                info!("low ESS, retrying with {} particles", cfg.n_particles);
            }
        }
    }
}

/// Evaluation of one buffer against whatever references the target admits.
///
/// Reports the buffer size, energy statistics, energy W1/W2 against an
/// i.i.d. reference (with an i.i.d.-vs-i.i.d. baseline of the same size),
/// GMM mode masses against quadrature, interatomic-distance W1/W2 for
/// particle systems, and the direct importance-sampling log ESS from
/// `source` when given. Histograms go to CSV files in `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_buffer<P: Potential + ?Sized>(
    cfg: &LadderConfig,
    target: &P,
    buffer: &SampleBuffer,
    label: &str,
    source: Option<&SampleBuffer>,
    baseline: Option<&Array2<f64>>,
    seed: u64,
    out_dir: &Path,
) -> Result<MetricReport> {
    fs::create_dir_all(out_dir)?;
    let ev = &cfg.eval;
    let beta = buffer.beta;
    let mut rep = MetricReport::new(label, beta, seed, buffer.len());
    rep.energy_evals_spent = buffer.energy_evals_spent;
    rep.set("low_ess", if buffer.low_ess { 1.0 } else { 0.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));

    let energies = match &buffer.cached_energies {
        Some(e) => e.clone(),
        None => metrics::energies_of(target, buffer.samples.view()),
    };
    let (kept, frac) = metrics::filter_energy_cap(&energies, ev.energy_cap);
    rep.set("energy_filtered_frac", frac);
    if !kept.is_empty() {
        rep.set("energy_mean", kept.iter().sum::<f64>() / kept.len() as f64);
    }

    if let Some(src) = source {
        rep.set("direct_is_log_ess", metrics::direct_temperature_is(src, beta)?);
    }

    if let Some(reference) = cfg.target.sample_iid(beta, ev.n_reference, &mut rng) {
        let ref_e = metrics::energies_of(target, reference.view());
        let (ref_kept, _) = metrics::filter_energy_cap(&ref_e, ev.energy_cap);
        let other = cfg
            .target
            .sample_iid(beta, buffer.len(), &mut rng)
            .expect("target admits i.i.d. sampling");
        let other_e = metrics::energies_of(target, other.view());
        let (other_kept, _) = metrics::filter_energy_cap(&other_e, ev.energy_cap);
        if !kept.is_empty() && !ref_kept.is_empty() {
            rep.set("energy_w1", metrics::wasserstein_1d(&kept, &ref_kept, 1)?);
            rep.set("energy_w2", metrics::wasserstein_1d(&kept, &ref_kept, 2)?);
            rep.set("energy_w1_iid_baseline", metrics::wasserstein_1d(&other_kept, &ref_kept, 1)?);
            rep.set("energy_w2_iid_baseline", metrics::wasserstein_1d(&other_kept, &ref_kept, 2)?);
            let lo = ref_kept.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ref_kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let h_buf = Histogram::new(&kept, lo, hi, ev.histogram_bins);
            let h_ref = Histogram::new(&ref_kept, lo, hi, ev.histogram_bins);
            metrics::write_histograms_csv(
                &out_dir.join("energy_hist.csv"),
                &[("samples", &h_buf), ("reference", &h_ref)],
            )?;
        }
    }

    if let TargetDensity::Gmm2d(g) = &cfg.target {
        let got = metrics::mode_fractions(g, buffer.samples.view());
        let want = metrics::gmm_mode_masses(g, beta, 8.0 * g.std / beta.sqrt(), 600);
        let mut worst: f64 = 0.0;
        for (k, (a, b)) in got.iter().zip(&want).enumerate() {
            rep.set(&format!("mode_mass_{k}"), *a);
            rep.set(&format!("mode_mass_ref_{k}"), *b);
            worst = worst.max((a - b).abs());
        }
        rep.set("mode_mass_max_abs_err", worst);
    }

    if let Some(n_p) = cfg.target.n_particles() {
        let dist = metrics::interatomic_distances(buffer.samples.view(), n_p);
        if let Some(chain) = &ev.reference_mcmc {
            let (reference, _) = sample_mcmc(target, &cfg.target, beta, chain, mix_seed(seed, 1))?;
            let ref_dist = metrics::interatomic_distances(reference.samples.view(), n_p);
            rep.set("distance_w1", metrics::wasserstein_1d(&dist, &ref_dist, 1)?);
            rep.set("distance_w2", metrics::wasserstein_1d(&dist, &ref_dist, 2)?);
            let hi = ref_dist.iter().cloned().fold(0.0, f64::max) * 1.2;
            let h_buf = Histogram::new(&dist, 0.0, hi, ev.histogram_bins);
            let h_ref = Histogram::new(&ref_dist, 0.0, hi, ev.histogram_bins);
            let mut series = vec![("samples", &h_buf), ("reference", &h_ref)];
            let h_base;
            if let Some(b) = baseline {
                let base_dist = metrics::interatomic_distances(b.view(), n_p);
                rep.set("baseline_distance_w2", metrics::wasserstein_1d(&base_dist, &ref_dist, 2)?);
                h_base = Histogram::new(&base_dist, 0.0, hi, ev.histogram_bins);
                series.push(("score_scaling", &h_base));
            }
            metrics::write_histograms_csv(&out_dir.join("distance_hist.csv"), &series)?;
            let n = ev.geometric_w2_n.min(buffer.len()).min(reference.len());
            if n > 0 {
                let a = buffer.samples.slice(s![..n, ..]);
                let b = reference.samples.slice(s![reference.len() - n.., ..]);
                rep.set("geometric_w2", metrics::geometric_w2(a, b)?);
            }
        }
    }

    if let Some(b) = baseline {
        let e = metrics::energies_of(target, b.view());
        let (bk, _) = metrics::filter_energy_cap(&e, ev.energy_cap);
        if !bk.is_empty() && !kept.is_empty() {
            rep.set("baseline_energy_w1_vs_samples", metrics::wasserstein_1d(&bk, &kept, 1)?);
        }
    }
    Ok(rep)
}

/// Trains the models for `rung`. Sequential mode fine-tunes on that rung's
/// buffer only; conditioned mode trains on every buffer up to `rung`.
fn train_rung<P: Potential + ?Sized>(
    cfg: &LadderConfig,
    run_dir: &Path,
    rung: usize,
    target: &P,
    tcfg: &TrainingConfig,
) -> Result<Models> {
    let mut buffers = Vec::new();
    let first = match cfg.training_mode {
        TrainingMode::Sequential => rung,
        TrainingMode::Conditioned => 0,
    };
    for r in first..=rung {
        buffers.push(SampleBuffer::load(&buffer_path(run_dir, r))?);
    }
    let init = if rung == 0 {
        let b0 = &buffers[0];
        let sigma_data = estimate_sigma_data(b0.samples.view());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, u64::MAX));
        Models::new(&cfg.model, b0.dim(), cfg.schedule.clone(), sigma_data, &mut rng)
    } else {
        Models::load(&checkpoint_dir(run_dir, rung - 1))?.0
    };
    let rd = rung_dir(run_dir, rung);
    let log = rd.join("train.jsonl");
    if log.exists() {
        fs::remove_file(&log)?;
    }
    let io = TrainIo {
        log: Some(log),
        checkpoint_dir: (tcfg.checkpoint_every > 0).then(|| rd.join("checkpoints_periodic")),
    };
    let mut refs: Vec<&mut SampleBuffer> = buffers.iter_mut().collect();
    let out = train_on_buffers(&init, &mut refs, target, tcfg, &io)?;
    for (r, b) in (first..=rung).zip(&buffers) {
        b.save(&buffer_path(run_dir, r))?;
    }
    out.models.save(&checkpoint_dir(run_dir, rung), cfg.betas()?[rung], tcfg.n_steps)?;
    Ok(out.models)
}

fn run_phase<P: Potential + ?Sized>(
    cfg: &LadderConfig,
    run_dir: &Path,
    target: &P,
    meter: &EnergyMeter,
    id: PhaseId,
) -> Result<()> {
    let betas = cfg.betas()?;
    let rung = id.rung;
    let beta = betas[rung];
    let rd = rung_dir(run_dir, rung);
    fs::create_dir_all(&rd)?;
    let seed = mix_seed(cfg.seed, id.phase.stream(rung));
    match id.phase {
        RungPhase::Sample if rung == 0 => {
            let t = meter.metered(target, Phase::Mcmc);
            let (buf, report) = sample_mcmc(&t, &cfg.target, beta, &cfg.mcmc, seed)?;
            info!("rung 0: {} MCMC samples, acceptance {:.3}", buf.len(), report.acceptance_rate);
            buf.save(&buffer_path(run_dir, 0))?;
            write_jsonl(&rd.join("diagnostics.jsonl"), [&report])?;
            let summary = SampleSummary {
                beta,
                n_particles: buf.len(),
                mcmc_acceptance: Some(report.acceptance_rate),
                ..Default::default()
            };
            write_atomic(&rd.join("sample_summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
        }
        RungPhase::Sample => {
            let (models, _, _) = Models::load(&checkpoint_dir(run_dir, rung - 1))?;
            let bridge = meter.metered(target, Phase::Bridging);
            let (buf, diag, summary) = anneal_rung(
                &models,
                &cfg.schedule,
                &bridge,
                betas[rung - 1],
                beta,
                &cfg.anneal_for(rung),
                cfg.low_ess,
                seed,
            )?;
            info!(
                "rung {rung}: annealed to β={beta}, final log ESS {:.3}, {} resamples",
                diag.final_log_ess, diag.resample_count
            );
            buf.save(&buffer_path(run_dir, rung))?;
            write_jsonl(&rd.join("diagnostics.jsonl"), &diag.steps)?;
            write_atomic(&rd.join("sample_summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
        }
        RungPhase::Train => {
            let tcfg = TrainingConfig {
                seed,
                ..cfg.training_for(rung)
            };
            let t = meter.metered(target, Phase::Training);
            train_rung(cfg, run_dir, rung, &t, &tcfg)?;
        }
        RungPhase::Eval => {
            let buf = SampleBuffer::load(&buffer_path(run_dir, rung))?;
            let summary: SampleSummary = serde_json::from_slice(&fs::read(rd.join("sample_summary.json"))?)?;
            let source = if rung > 0 {
                Some(SampleBuffer::load(&buffer_path(run_dir, 0))?)
            } else {
                None
            };
            let baseline = if rung > 0 {
                let (models, _, _) = Models::load(&checkpoint_dir(run_dir, rung - 1))?;
                let a = cfg.anneal_for(rung);
                let score = models.score_field(betas[rung - 1], a.divergence);
                Some(metrics::score_scaling_sample(
                    &score,
                    &cfg.schedule,
                    beta / betas[rung - 1],
                    buf.len(),
                    a.n_steps,
                    a.xi,
                    mix_seed(seed, 2),
                ))
            } else {
                None
            };
            let t = meter.metered(target, Phase::Evaluation);
            let mut rep = if cfg.eval.enabled {
                evaluate_buffer(
                    cfg,
                    &t,
                    &buf,
                    &format!("rung_{rung:02}"),
                    source.as_ref(),
                    baseline.as_ref(),
                    seed,
                    &rd,
                )?
            } else {
                MetricReport::new(format!("rung_{rung:02}"), beta, seed, buf.len())
            };
            if let Some(l) = summary.final_log_ess {
                rep.set("final_log_ess", l);
            }
            rep.set("retries", summary.retries as f64);
            rep.save(&rd.join("metrics.json"))?;
        }
    }
    Ok(())
}

fn collect_output(cfg: &LadderConfig, run_dir: &Path, m: &Manifest) -> Result<LadderOutput> {
    let n = cfg.betas()?.len();
    let mut reports = Vec::new();
    let mut final_buffer = None;
    for r in 0..n {
        if m.is_done(PhaseId { rung: r, phase: RungPhase::Eval }) {
            reports.push(MetricReport::load(&rung_dir(run_dir, r).join("metrics.json"))?);
        }
        if m.is_done(PhaseId { rung: r, phase: RungPhase::Sample }) {
            final_buffer = Some(r);
        }
    }
    let final_buffer = match final_buffer {
        Some(r) => Some(SampleBuffer::load(&buffer_path(run_dir, r))?),
        None => None,
    };
    Ok(LadderOutput {
        final_buffer,
        reports,
        meter: m.meter,
        finished: m.finished,
    })
}

/// Runs (or continues) the ladder in `run_dir` against `target`, which
/// must describe the same density as `cfg.target`. Passing an instrumented
/// stand-in lets tests observe every query.
pub fn run_with<P: Potential + ?Sized>(
    cfg: &LadderConfig,
    run_dir: &Path,
    target: &P,
    opts: &RunOptions,
) -> Result<LadderOutput> {
    cfg.validate()?;
    let _lock = RunLock::acquire(run_dir)?;
    let mut manifest = if run_dir.join(MANIFEST).exists() {
        let m = Manifest::load(run_dir)?;
        if m.config != *cfg {
            return Err(PitaError::Config(format!(
                "{} holds a run with a different configuration",
                run_dir.display()
            )));
        }
        m
    } else {
        let m = Manifest::new(cfg.clone());
        m.save(run_dir)?;
        m
    };
    if manifest.finished {
        return collect_output(cfg, run_dir, &manifest);
    }
    let meter = EnergyMeter::from_snapshot(&manifest.meter);
    let n = cfg.betas()?.len();
    let mut ran = 0;
    for rung in 0..n {
        for phase in RungPhase::ORDER {
            let id = PhaseId { rung, phase };
            if manifest.is_done(id) {
                continue;
            }
            if opts.stop_after_phases.is_some_and(|k| ran >= k) {
                return collect_output(cfg, run_dir, &manifest);
            }
            run_phase(cfg, run_dir, target, &meter, id)?;
            manifest.completed.push(id);
            manifest.meter = meter.snapshot();
            manifest.save(run_dir)?;
            ran += 1;
        }
    }
    manifest.finished = true;
    manifest.save(run_dir)?;
    collect_output(cfg, run_dir, &manifest)
}

/// Runs the ladder against the configured target.
pub fn run_ladder(cfg: &LadderConfig, run_dir: &Path) -> Result<LadderOutput> {
    run_with(cfg, run_dir, &cfg.target, &RunOptions::default())
}

/// Continues the run in `run_dir` from its last completed phase.
pub fn resume(run_dir: &Path) -> Result<LadderOutput> {
    resume_with(run_dir, &RunOptions::default())
}

pub fn resume_with(run_dir: &Path, opts: &RunOptions) -> Result<LadderOutput> {
    let m = Manifest::load(run_dir)?;
    let cfg = m.config;
    run_with(&cfg, run_dir, &cfg.target, opts)
}
