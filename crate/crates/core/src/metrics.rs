//! Sample-quality metrics and the importance-sampling / score-scaling
//! baselines.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::annealer::simulate_reverse;
use crate::energies::{log_sum_exp, Gmm2d, Potential};
use crate::error::{PitaError, Result};
use crate::mcmc::SampleBuffer;
use crate::netkernel::ScoreField;
use crate::schedule::NoiseSchedule;

/// Largest problem solved by exact assignment.
pub const ASSIGNMENT_CAP: usize = 2048;

/// Energies above this are dropped from histogram metrics by default.
pub const DEFAULT_ENERGY_CAP: f64 = 1000.0;

/// Normalized Kish ESS in log space, `log[(Σw)² / (N Σw²)]`.
pub fn log_ess(log_weights: &[f64]) -> f64 {
    let n = log_weights.len();
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    let a = log_sum_exp(log_weights);
    if a == f64::NEG_INFINITY {
        warn!("log-ESS of {n} weights that are all zero");
        return a;
    }
    let doubled: Vec<f64> = log_weights.iter().map(|l| 2.0 * l).collect();
    let b = log_sum_exp(&doubled);
    (2.0 * a - b - (n as f64).ln()).min(0.0)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Exact one-dimensional `W_p` for `p ∈ {1, 2}`.
///
/// Equal sizes use the sorted coupling; otherwise the two quantile
/// functions are integrated over the merged breakpoints.
pub fn wasserstein_1d(a: &[f64], b: &[f64], order: u32) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(PitaError::EmptyInput("wasserstein_1d"));
    }
    if order != 1 && order != 2 {
        return Err(PitaError::Config(format!("unsupported Wasserstein order {order}")));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let cost = |u: f64, v: f64| {
        let d = (u - v).abs();
        if order == 1 {
            d
        } else {
            d * d
        }
    };
    let total = if sa.len() == sb.len() {
        sa.iter().zip(&sb).map(|(u, v)| cost(*u, *v)).sum::<f64>() / sa.len() as f64
    } else {
        let (na, nb) = (sa.len(), sb.len());
        let (mut i, mut j) = (0, 0);
        let mut q = 0.0;
        let mut acc = 0.0;
        while i < na && j < nb {
            let qa = (i + 1) as f64 / na as f64;
            let qb = (j + 1) as f64 / nb as f64;
            let next = qa.min(qb);
            acc += (next - q) * cost(sa[i], sb[j]);
            q = next;
            if qa <= next {
                i += 1;
            }
            if qb <= next {
                j += 1;
            }
        }
        acc
    };
    Ok(if order == 1 { total } else { total.sqrt() })
}

/// Minimum-cost perfect matching on a dense square cost matrix.
/// Returns `assignment[row] = col`.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    // potentials-based shortest augmenting path, 1-indexed internally
    let n = cost.nrows();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// `W_2` between two equal-size point clouds by exact assignment.
pub fn geometric_w2(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let n = a.nrows();
    if n == 0 {
        return Err(PitaError::EmptyInput("geometric_w2"));
    }
    if b.nrows() != n || a.ncols() != b.ncols() {
        return Err(PitaError::DimensionMismatch {
            expected: n,
            got: b.nrows(),
        });
    }
    if n > ASSIGNMENT_CAP {
        return Err(PitaError::SizeCapExceeded { n, cap: ASSIGNMENT_CAP });
    }
    let cost = Array2::from_shape_fn((n, n), |(i, j)| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
    });
    let m = hungarian(&cost);
    let total: f64 = m.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((total / n as f64).sqrt())
}

/// All pairwise particle distances, configuration by configuration.
pub fn interatomic_distances(configs: ArrayView2<f64>, n_particles: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(configs.nrows() * n_particles * (n_particles.saturating_sub(1)) / 2);
    let dim = if n_particles == 0 { 0 } else { configs.ncols() / n_particles };
    for row in configs.rows() {
        for i in 0..n_particles {
            for j in (i + 1)..n_particles {
                let mut d2 = 0.0;
                for k in 0..dim {
                    d2 += (row[i * dim + k] - row[j * dim + k]).powi(2);
                }
                out.push(d2.sqrt());
            }
        }
    }
    out
}

/// Log-ESS of reweighting a buffer at `β_i` to `β_target` directly.
pub fn direct_temperature_is(buffer: &SampleBuffer, beta_target: f64) -> Result<f64> {
    let e = buffer
        .cached_energies
        .as_ref()
        .ok_or(PitaError::EmptyInput("buffer without cached energies"))?;
    let db = beta_target - buffer.beta;
    let lw: Vec<f64> = e.iter().map(|e| -db * e).collect();
    Ok(log_ess(&lw))
}

/// Reverse SDE with the score multiplied by `gamma`; a biased baseline.
pub fn score_scaling_sample<S: ScoreField + ?Sized>(
    score: &S,
    schedule: &NoiseSchedule,
    gamma: f64,
    n: usize,
    n_steps: usize,
    xi: f64,
    seed: u64,
) -> Array2<f64> {
    simulate_reverse(score, schedule, n, n_steps, xi, gamma, 128, seed)
}

/// Drops energies above `cap`; returns the kept values and the dropped
/// fraction.
pub fn filter_energy_cap(energies: &[f64], cap: f64) -> (Vec<f64>, f64) {
    let kept: Vec<f64> = energies.iter().copied().filter(|e| e.is_finite() && *e <= cap).collect();
    let frac = if energies.is_empty() {
        0.0
    } else {
        1.0 - kept.len() as f64 / energies.len() as f64
    };
    (kept, frac)
}

/// Energies of every row under `target`. Degenerate rows map to `+∞` so
/// the cap filters them.
pub fn energies_of<P: Potential + ?Sized>(target: &P, x: ArrayView2<f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|r| target.energy(&r.to_vec()).unwrap_or(f64::INFINITY))
        .collect()
}

/// Fraction of rows nearest to each mixture center.
pub fn mode_fractions(gmm: &Gmm2d, x: ArrayView2<f64>) -> Vec<f64> {
    let mut c = vec![0usize; gmm.centers.len()];
    for r in x.rows() {
        c[gmm.nearest_mode(&[r[0], r[1]])] += 1;
    }
    c.into_iter().map(|k| k as f64 / x.nrows().max(1) as f64).collect()
}

/// Mass of `π^β` in each nearest-center cell by midpoint quadrature on a
/// square grid covering every center with `margin` to spare.
pub fn gmm_mode_masses(gmm: &Gmm2d, beta: f64, margin: f64, n_grid: usize) -> Vec<f64> {
    let target = crate::energies::TargetDensity::Gmm2d(gmm.clone());
    let lo_x = gmm.centers.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min) - margin;
    let hi_x = gmm.centers.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max) + margin;
    let lo_y = gmm.centers.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min) - margin;
    let hi_y = gmm.centers.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max) + margin;
    let (hx, hy) = ((hi_x - lo_x) / n_grid as f64, (hi_y - lo_y) / n_grid as f64);
    let mut logs: Vec<Vec<f64>> = vec![Vec::new(); gmm.centers.len()];
    for i in 0..n_grid {
        for j in 0..n_grid {
            let p = [lo_x + (i as f64 + 0.5) * hx, lo_y + (j as f64 + 0.5) * hy];
            let e = target.energy(&p).expect("mixture energy is total");
            logs[gmm.nearest_mode(&p)].push(-beta * e);
        }
    }
    let per: Vec<f64> = logs.iter().map(|l| log_sum_exp(l)).collect();
    let z = log_sum_exp(&per);
    per.into_iter().map(|l| (l - z).exp()).collect()
}

/// Fixed-bin histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Samples outside the edges.
    pub outside: u64,
}

impl Histogram {
    pub fn new(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * w).collect();
        let mut counts = vec![0; bins];
        let mut outside = 0;
        for &s in samples {
            let k = ((s - lo) / w).floor();
            if k >= 0.0 && (k as usize) < bins {
                counts[k as usize] += 1;
            } else if s == hi {
                counts[bins - 1] += 1;
            } else {
                outside += 1;
            }
        }
        Self { edges, counts, outside }
    }

    pub fn density(&self) -> Vec<f64> {
        let n: u64 = self.counts.iter().sum::<u64>() + self.outside;
        self.counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(c, e)| *c as f64 / (n.max(1) as f64 * (e[1] - e[0])))
            .collect()
    }
}

/// Writes histograms sharing one binning as CSV columns
/// `bin_lo,bin_hi,<name>...` of densities.
pub fn write_histograms_csv(path: &Path, series: &[(&str, &Histogram)]) -> Result<()> {
    let first = series.first().ok_or(PitaError::EmptyInput("histogram series"))?.1;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
    header.extend(series.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    let dens: Vec<Vec<f64>> = series.iter().map(|(_, h)| h.density()).collect();
    for (i, e) in first.edges.windows(2).enumerate() {
        let mut rec = vec![e[0].to_string(), e[1].to_string()];
        rec.extend(dens.iter().map(|d| d.get(i).copied().unwrap_or(f64::NAN).to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| PitaError::Config(e.to_string()))?;
    crate::write_atomic(path, &bytes)
}

fn csv_err(e: csv::Error) -> PitaError {
    PitaError::Config(format!("csv: {e}"))
}

/// Named scalar metrics from one evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub beta: f64,
    pub seed: u64,
    pub n_samples: usize,
    pub metrics: BTreeMap<String, f64>,
    pub energy_evals_spent: u64,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, beta: f64, seed: u64, n_samples: usize) -> Self {
        Self {
            label: label.into(),
            beta,
            seed,
            n_samples,
            ..Self::default()
        }
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
