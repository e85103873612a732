//! Metropolis-adjusted Langevin chains against `π^β`.

pub mod buffer;

use log::warn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use buffer::{Provenance, SampleBuffer};

use crate::energies::{remove_com, Potential, TargetDensity};
use crate::error::{PitaError, Result};
use crate::mix_seed;

fn default_target_accept() -> f64 {
    0.57
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Initial step size `h`; adapted during burn-in when `adapt` is set.
    pub step_size: f64,
    pub n_steps: usize,
    pub n_chains: usize,
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub adapt: bool,
    #[serde(default = "default_target_accept")]
    pub target_accept: f64,
}

fn one() -> usize {
    1
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.thin == 0 || self.n_chains == 0 {
            return Err(PitaError::Config(format!(
                "bad chain config: step_size={}, thin={}, n_chains={}",
                self.step_size, self.thin, self.n_chains
            )));
        }
        Ok(())
    }
}

/// Current chain position with its cached energy and score.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub energy: f64,
    pub score: Vec<f64>,
}

impl ChainState {
    pub fn evaluate<P: Potential + ?Sized>(target: &P, x: Vec<f64>) -> Result<Self> {
        let (energy, score) = target.energy_and_score(&x)?;
        Ok(Self { x, energy, score })
    }
}

/// Log Metropolis-Hastings ratio for moving from `cur` to `prop` under
/// `π^β` with Langevin proposals of step `h`.
pub fn mala_log_accept(beta: f64, h: f64, cur: &ChainState, prop: &ChainState) -> f64 {
    // log q(b | a) up to a constant shared by both directions
    let log_q = |to: &ChainState, from: &ChainState| {
        let mut s = 0.0;
        for i in 0..to.x.len() {
            let m = from.x[i] + 0.5 * h * beta * from.score[i];
            s += (to.x[i] - m).powi(2);
        }
        -s / (2.0 * h)
    };
    -beta * prop.energy + beta * cur.energy + log_q(cur, prop) - log_q(prop, cur)
}

fn is_degenerate(e: &PitaError) -> bool {
    matches!(e, PitaError::DegenerateConfiguration { .. })
}

/// One MALA transition from a cached state. Returns the new state and
/// whether the proposal was accepted. A degenerate proposal is rejected.
///
/// Exactly one joint energy/score query is made.
pub fn mala_transition<P: Potential + ?Sized, R: Rng + ?Sized>(
    target: &P,
    beta: f64,
    cur: &ChainState,
    h: f64,
    center_particles: Option<usize>,
    rng: &mut R,
) -> Result<(ChainState, bool)> {
    let mut y: Vec<f64> = cur
        .x
        .iter()
        .zip(&cur.score)
        .map(|(x, s)| {
            let z: f64 = StandardNormal.sample(rng);
            x + 0.5 * h * beta * s + h.sqrt() * z
        })
        .collect();
    let u: f64 = rng.random();
    if let Some(n) = center_particles {
        // the energy is translation invariant, so the center of mass is a
        // free coordinate and can be pinned at the origin
        remove_com(&mut y, n);
    }
    let prop = match target.energy_and_score(&y) {
        Ok((energy, score)) => ChainState { x: y, energy, score },
        Err(e) if is_degenerate(&e) => return Ok((cur.clone(), false)),
        Err(e) => return Err(e),
    };
    if !prop.energy.is_finite() || prop.score.iter().any(|v| !v.is_finite()) {
        return Ok((cur.clone(), false));
    }
    let log_a = mala_log_accept(beta, h, cur, &prop);
    if u.ln() < log_a {
        Ok((prop, true))
    } else {
        Ok((cur.clone(), false))
    }
}

/// One MALA step from a bare position: evaluates the current state too, so
/// it costs two oracle queries.
pub fn mala_step<P: Potential + ?Sized, R: Rng + ?Sized>(
    target: &P,
    beta: f64,
    x: &[f64],
    step_size: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, bool)> {
    if !(beta > 0.0) {
        return Err(PitaError::InvalidTemperature(beta));
    }
    let cur = ChainState::evaluate(target, x.to_vec())?;
    let (next, acc) = mala_transition(target, beta, &cur, step_size, None, rng)?;
    Ok((next.x, acc))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub acceptance_rate: f64,
    pub per_chain_acceptance: Vec<f64>,
    pub final_step_sizes: Vec<f64>,
    pub energy_evals: u64,
    pub warnings: Vec<String>,
}

struct ChainOutput {
    samples: Vec<Vec<f64>>,
    energies: Vec<f64>,
    scores: Vec<Vec<f64>>,
    accepted: usize,
    proposed: usize,
    step: f64,
    calls: u64,
}

fn run_chain<P: Potential + ?Sized>(
    target: &P,
    init: Vec<f64>,
    beta: f64,
    cfg: &ChainConfig,
    center: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<ChainOutput> {
    let mut state = ChainState::evaluate(target, init)?;
    let mut out = ChainOutput {
        samples: Vec::new(),
        energies: Vec::new(),
        scores: Vec::new(),
        accepted: 0,
        proposed: 0,
        step: cfg.step_size,
        calls: 1,
    };
    let mut log_h = cfg.step_size.ln();
    for i in 0..cfg.n_steps {
        let h = log_h.exp();
        let (next, acc) = mala_transition(target, beta, &state, h, center, rng)?;
        out.calls += 1;
        state = next;
        if i < cfg.burn_in {
            if cfg.adapt {
                let a = if acc { 1.0 } else { 0.0 };
                log_h += (a - cfg.target_accept) / (1.0 + i as f64).powf(0.6);
            }
            continue;
        }
        out.proposed += 1;
        if acc {
            out.accepted += 1;
        }
        if (i - cfg.burn_in) % cfg.thin == 0 {
            out.samples.push(state.x.clone());
            out.energies.push(state.energy);
            out.scores.push(state.score.clone());
        }
    }
    out.step = log_h.exp();
    Ok(out)
}

/// Runs `n_chains` independent chains in parallel and concatenates their
/// post-burn-in, thinned states in chain order.
///
/// Starting states come from [`TargetDensity::initial_state`] unless
/// `init` supplies one row per chain.
pub fn collect_buffer<P: Potential + ?Sized>(
    target: &P,
    layout: &TargetDensity,
    beta: f64,
    cfg: &ChainConfig,
    init: Option<&Array2<f64>>,
) -> Result<(SampleBuffer, ChainReport)> {
    if !(beta > 0.0) {
        return Err(PitaError::InvalidTemperature(beta));
    }
    cfg.validate()?;
    if cfg.n_steps <= cfg.burn_in {
        return Err(PitaError::EmptyBuffer);
    }
    let center = layout.n_particles();
    let outputs: Vec<Result<ChainOutput>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, c as u64));
            let x0 = match init {
                Some(rows) => rows.row(c % rows.nrows()).to_vec(),
                None => layout.initial_state(&mut rng),
            };
            run_chain(target, x0, beta, cfg, center, &mut rng)
        })
        .collect();
    let mut outs = Vec::with_capacity(outputs.len());
    for o in outputs {
        outs.push(o?);
    }

    let d = target.dim();
    let total: usize = outs.iter().map(|o| o.samples.len()).sum();
    if total == 0 {
        return Err(PitaError::EmptyBuffer);
    }
    let mut samples = Vec::with_capacity(total * d);
    let mut scores = Vec::with_capacity(total * d);
    let mut energies = Vec::with_capacity(total);
    for o in &outs {
        for (x, s) in o.samples.iter().zip(&o.scores) {
            samples.extend_from_slice(x);
            scores.extend_from_slice(s);
        }
        energies.extend_from_slice(&o.energies);
    }
    let calls: u64 = outs.iter().map(|o| o.calls).sum();
    let acc: usize = outs.iter().map(|o| o.accepted).sum();
    let prop: usize = outs.iter().map(|o| o.proposed).sum();
    let rate = acc as f64 / prop.max(1) as f64;
    let mut report = ChainReport {
        acceptance_rate: rate,
        per_chain_acceptance: outs.iter().map(|o| o.accepted as f64 / o.proposed.max(1) as f64).collect(),
        final_step_sizes: outs.iter().map(|o| o.step).collect(),
        energy_evals: calls,
        warnings: Vec::new(),
    };
    if !(0.1..=0.9).contains(&rate) {
        let msg = format!("MALA acceptance rate {rate:.3} outside [0.1, 0.9]");
        warn!("{msg}");
        report.warnings.push(msg);
    }
    let buffer = SampleBuffer {
        beta,
        samples: Array2::from_shape_vec((total, d), samples).expect("rows of dim d"),
        cached_energies: Some(energies),
        cached_scores: Some(Array2::from_shape_vec((total, d), scores).expect("rows of dim d")),
        provenance: Provenance::Mcmc,
        energy_evals_spent: calls,
        low_ess: false,
    };
    Ok((buffer, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{CallCounts, CountingPotential, Gmm2d, LjParams, LjSignConvention};

    fn cfg(n_steps: usize, n_chains: usize, burn_in: usize) -> ChainConfig {
        ChainConfig {
            step_size: 0.1,
            n_steps,
            n_chains,
            burn_in,
            thin: 1,
            seed: 5,
            adapt: false,
            target_accept: 0.57,
        }
    }

    #[test]
    fn identical_proposal_has_unit_acceptance() {
        let s = ChainState {
            x: vec![0.3, -1.0],
            energy: 1.2,
            score: vec![0.0, 0.0],
        };
        assert_eq!(mala_log_accept(1.0, 0.1, &s, &s), 0.0);
    }

    fn moments(v: impl Iterator<Item = f64>) -> (f64, f64, usize) {
        let v: Vec<f64> = v.collect();
        let n = v.len();
        let m = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        (m, var, n)
    }

    /// Integrated autocorrelation time from the initial positive sequence.
    fn iact(v: &[f64]) -> f64 {
        let n = v.len();
        let m = v.iter().sum::<f64>() / n as f64;
        let c0 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        let mut tau = 1.0;
        for lag in 1..n / 10 {
            let c = (0..n - lag).map(|i| (v[i] - m) * (v[i + lag] - m)).sum::<f64>() / n as f64 / c0;
            if c < 0.05 {
                break;
            }
            tau += 2.0 * c;
        }
        tau
    }

    #[test]
    fn standard_gaussian_stationary_law() {
        let t = TargetDensity::standard_normal(1);
        let (b, rep) = collect_buffer(&t, &t, 1.0, &cfg(100_000, 1, 1000), None).unwrap();
        let xs: Vec<f64> = b.samples.column(0).to_vec();
        let (m, var, n) = moments(xs.iter().copied());
        let se = (iact(&xs) / n as f64).sqrt();
        assert!(m.abs() < 3.0 * se, "mean {m} se {se}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        assert!(rep.acceptance_rate > 0.9);
    }

    #[test]
    fn tempered_gaussian_variance() {
        let t = TargetDensity::standard_normal(1);
        let c = ChainConfig {
            adapt: true,
            ..cfg(60_000, 4, 2000)
        };
        let (b, _) = collect_buffer(&t, &t, 0.25, &c, None).unwrap();
        let (_, var, _) = moments(b.samples.column(0).iter().copied());
        assert!((var - 4.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn all_burn_in_is_empty() {
        let t = TargetDensity::standard_normal(1);
        assert!(matches!(
            collect_buffer(&t, &t, 1.0, &cfg(10, 2, 10), None),
            Err(PitaError::EmptyBuffer)
        ));
    }

    #[test]
    fn same_seed_same_buffer_and_exact_call_count() {
        let t = TargetDensity::Gmm2d(Gmm2d::default());
        let counts = CallCounts::default();
        let ct = CountingPotential::new(&t, &counts);
        let c = ChainConfig {
            thin: 3,
            adapt: true,
            ..cfg(500, 8, 100)
        };
        let (a, _) = collect_buffer(&ct, &t, 0.5, &c, None).unwrap();
        let (b, _) = collect_buffer(&t, &t, 0.5, &c, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.energy_evals_spent, counts.total());
        assert_eq!(a.energy_evals_spent, 8 * 501);
        assert_eq!(a.len(), 8 * (400usize).div_ceil(3));
    }

    #[test]
    fn cached_values_match_recomputation() {
        let t = TargetDensity::Gmm2d(Gmm2d::default());
        let (b, _) = collect_buffer(&t, &t, 0.5, &cfg(200, 2, 50), None).unwrap();
        let e = b.cached_energies.as_ref().unwrap();
        let s = b.cached_scores.as_ref().unwrap();
        for i in 0..b.len() {
            let (e2, s2) = t.energy_and_score(b.samples.row(i).as_slice().unwrap()).unwrap();
            assert!((e[i] - e2).abs() < 1e-10);
            for j in 0..2 {
                assert!((s[[i, j]] - s2[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lj_chain_stays_centered_and_finite() {
        let t = TargetDensity::LennardJones(LjParams {
            sign_convention: LjSignConvention::Standard,
            ..LjParams::lj13()
        });
        let c = ChainConfig {
            step_size: 1e-3,
            adapt: true,
            ..cfg(400, 2, 200)
        };
        let (b, rep) = collect_buffer(&t, &t, 0.25, &c, None).unwrap();
        for row in b.samples.rows() {
            let com = crate::energies::center_of_mass(row.as_slice().unwrap(), 13);
            assert!(com.iter().all(|v| v.abs() < 1e-10));
        }
        assert!(rep.acceptance_rate > 0.2);
    }

    /// Stationarity and pairwise balance of transition counts on a binned
    /// double well.
    #[test]
    fn detailed_balance_on_a_grid() {
        let t = TargetDensity::DoubleWell1d { barrier: 1.0 };
        let c = ChainConfig {
            step_size: 0.3,
            ..cfg(400_000, 1, 1000)
        };
        let (b, _) = collect_buffer(&t, &t, 1.0, &c, None).unwrap();
        let xs = b.samples.column(0).to_vec();
        let edges: Vec<f64> = (0..=12).map(|i| -2.4 + 0.4 * i as f64).collect();
        let bin = |x: f64| edges.windows(2).position(|w| x >= w[0] && x < w[1]);
        let nb = edges.len() - 1;

        // stationarity: occupancy versus quadrature of exp(-E)
        let mut occ = vec![0.0; nb];
        for x in &xs {
            if let Some(k) = bin(*x) {
                occ[k] += 1.0;
            }
        }
        let mut mass = vec![0.0; nb];
        let fine = 4000;
        let mut z = 0.0;
        for i in 0..fine {
            let x = -3.0 + 6.0 * (i as f64 + 0.5) / fine as f64;
            let w = (-t.energy(&[x]).unwrap()).exp();
            z += w;
            if let Some(k) = bin(x) {
                mass[k] += w;
            }
        }
        let n = xs.len() as f64;
        let tau = iact(&xs);
        for k in 0..nb {
            let p = mass[k] / z;
            let se = (tau * p * (1.0 - p) / n).sqrt();
            assert!((occ[k] / n - p).abs() < 4.0 * se + 1e-3, "bin {k}: {} vs {p}", occ[k] / n);
        }

        // balance: flows i→j and j→i agree within Poisson noise
        let mut flow = vec![vec![0.0f64; nb]; nb];
        for w in xs.windows(2) {
            if let (Some(i), Some(j)) = (bin(w[0]), bin(w[1])) {
                flow[i][j] += 1.0;
            }
        }
        for i in 0..nb {
            for j in (i + 1)..nb {
                let (a, b) = (flow[i][j], flow[j][i]);
                if a + b < 50.0 {
                    continue;
                }
                assert!((a - b).abs() < 5.0 * (a + b).sqrt(), "{i}->{j}: {a} vs {b}");
            }
        }
    }
}
