//! Preconditioned denoiser, score and energy heads on top of an MLP backbone.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::mlp::{MlpSpec, ParamVector};
use crate::error::{PitaError, Result};
use crate::schedule::NoiseSchedule;

/// Karras preconditioning as functions of the noise level σ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub sigma_data: f64,
}

impl Preconditioner {
    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        0.25 * sigma.ln()
    }

    /// Default loss weighting `(σ² + σ_d²) / (σ σ_d)²`.
    pub fn lambda(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        (sigma * sigma + sd2) / (sigma * sigma * sd2)
    }
}

/// The `a` constant in the energy preconditioning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondA {
    /// Use the schedule's `a_t` (zero for variance exploding).
    Schedule,
    Fixed(f64),
}

/// Multiplicative β in the heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadBeta {
    /// Multiply by the β the head is called with.
    Input,
    Fixed(f64),
}

fn default_a() -> PrecondA {
    PrecondA::Fixed(1.0)
}
fn default_xi() -> f64 {
    1.0
}
fn default_head_beta() -> HeadBeta {
    HeadBeta::Fixed(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    #[serde(default = "default_a")]
    pub energy_precond_a: PrecondA,
    #[serde(default = "default_xi")]
    pub energy_precond_xi: f64,
    #[serde(default = "default_head_beta")]
    pub head_beta: HeadBeta,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            energy_precond_a: default_a(),
            energy_precond_xi: 1.0,
            head_beta: default_head_beta(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Divergence {
    Exact,
    Hutchinson { n_probes: usize },
}

/// Per-row constants for one batch.
pub struct RowCoeffs {
    pub sigma: Vec<f64>,
    cond: Array2<f64>,
    c_in: Vec<f64>,
    skip: Vec<f64>,
    out: Vec<f64>,
    inv_sigma2: Vec<f64>,
    quad: Vec<f64>,
    cross: Vec<f64>,
    head_beta: Vec<f64>,
}

/// Backbone plus preconditioning; shared by the denoiser and energy heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetArch {
    pub mlp: MlpSpec,
    pub precond: Preconditioner,
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub head: HeadConfig,
}

fn col(g: &mut Graph, v: &[f64]) -> Var {
    g.column(v)
}

impl NetArch {
    pub fn dim(&self) -> usize {
        self.mlp.input_dim
    }

    pub fn row_coeffs(&self, sigma: &[f64], beta: &[f64]) -> RowCoeffs {
        let n = sigma.len();
        assert_eq!(beta.len(), n, "one β per row");
        let p = &self.precond;
        let a = match self.head.energy_precond_a {
            PrecondA::Schedule => 0.0,
            PrecondA::Fixed(a) => a,
        };
        let xi = self.head.energy_precond_xi;
        let mut cond = Array2::zeros((n, self.mlp.cond_dim));
        let mut rc = RowCoeffs {
            sigma: sigma.to_vec(),
            cond: Array2::zeros((0, 0)),
            c_in: Vec::with_capacity(n),
            skip: Vec::with_capacity(n),
            out: Vec::with_capacity(n),
            inv_sigma2: Vec::with_capacity(n),
            quad: Vec::with_capacity(n),
            cross: Vec::with_capacity(n),
            head_beta: Vec::with_capacity(n),
        };
        for i in 0..n {
            let s = sigma[i];
            let hb = match self.head.head_beta {
                HeadBeta::Input => beta[i],
                HeadBeta::Fixed(b) => b,
            };
            let (cs, co, ci) = (p.c_skip(s), p.c_out(s), p.c_in(s));
            let s2 = s * s;
            if self.mlp.cond_dim >= 1 {
                cond[[i, 0]] = p.c_noise(s);
            }
            if self.mlp.cond_dim >= 2 {
                cond[[i, 1]] = beta[i];
            }
            rc.c_in.push(ci);
            rc.skip.push(1.0 + hb * (cs - 1.0));
            rc.out.push(hb * co);
            rc.inv_sigma2.push(1.0 / s2);
            rc.quad.push(hb * (1.0 - a * cs) / (2.0 * s2));
            rc.cross.push(hb * xi * co / (ci * s2));
            rc.head_beta.push(hb);
        }
        rc.cond = cond;
        rc
    }

    pub fn coeffs_at(&self, n: usize, t: f64, beta: f64) -> RowCoeffs {
        let sigma = self.schedule.sigma(t);
        self.row_coeffs(&vec![sigma; n], &vec![beta; n])
    }

    fn backbone(&self, g: &mut Graph, p: &[Var], x: Var, rc: &RowCoeffs) -> Var {
        let cin = col(g, &rc.c_in);
        let xin = g.mul_col(x, cin);
        let cond = g.leaf(rc.cond.clone());
        self.mlp.forward(g, p, xin, cond)
    }

    /// `D = (1 + β(c_skip - 1)) x + β c_out F(c_in x, c)`.
    pub fn denoise_graph(&self, g: &mut Graph, p: &[Var], x: Var, rc: &RowCoeffs) -> Var {
        let f = self.backbone(g, p, x, rc);
        let skip = col(g, &rc.skip);
        let out = col(g, &rc.out);
        let a = g.mul_col(x, skip);
        let b = g.mul_col(f, out);
        g.add(a, b)
    }

    /// `s = (D - x) / σ²`.
    pub fn score_graph(&self, g: &mut Graph, p: &[Var], x: Var, rc: &RowCoeffs) -> Var {
        let d = self.denoise_graph(g, p, x, rc);
        let diff = g.sub(d, x);
        let inv = col(g, &rc.inv_sigma2);
        g.mul_col(diff, inv)
    }

    /// Per-row energies `U (n×1)`, plus `β o(c)` when the backbone has an
    /// offset head.
    pub fn energy_graph(&self, g: &mut Graph, p: &[Var], x: Var, rc: &RowCoeffs) -> Var {
        let f = self.backbone(g, p, x, rc);
        let xx = g.row_sq_norm(x);
        let xf = g.mul(x, f);
        let xf = g.sum_cols(xf);
        let q = col(g, &rc.quad);
        let c = col(g, &rc.cross);
        let a = g.mul_col(xx, q);
        let b = g.mul_col(xf, c);
        let u = g.sub(a, b);
        let cond = g.leaf(rc.cond.clone());
        match self.mlp.offset(g, p, cond) {
            Some(o) => {
                let hb = col(g, &rc.head_beta);
                let o = g.mul_col(o, hb);
                g.add(u, o)
            }
            None => u,
        }
    }

    pub fn denoise_rows(&self, params: &ParamVector, x: ArrayView2<f64>, rc: &RowCoeffs) -> Array2<f64> {
        let mut g = Graph::new();
        let p = params.leaves(&mut g);
        let xv = g.leaf(x.to_owned());
        let d = self.denoise_graph(&mut g, &p, xv, rc);
        g.value(d).clone()
    }

    pub fn denoise(&self, params: &ParamVector, x: ArrayView2<f64>, t: f64, beta: f64) -> Array2<f64> {
        self.denoise_rows(params, x, &self.coeffs_at(x.nrows(), t, beta))
    }

    pub fn score(&self, params: &ParamVector, x: ArrayView2<f64>, t: f64, beta: f64) -> Array2<f64> {
        let rc = self.coeffs_at(x.nrows(), t, beta);
        let d = self.denoise_rows(params, x, &rc);
        let mut s = d - &x;
        for (mut row, inv) in s.rows_mut().into_iter().zip(&rc.inv_sigma2) {
            row *= *inv;
        }
        s
    }

    pub fn energy_rows(&self, params: &ParamVector, x: ArrayView2<f64>, rc: &RowCoeffs) -> Vec<f64> {
        let mut g = Graph::new();
        let p = params.leaves(&mut g);
        let xv = g.leaf(x.to_owned());
        let u = self.energy_graph(&mut g, &p, xv, rc);
        g.value(u).iter().copied().collect()
    }

    pub fn energy(&self, params: &ParamVector, x: ArrayView2<f64>, t: f64, beta: f64) -> Vec<f64> {
        self.energy_rows(params, x, &self.coeffs_at(x.nrows(), t, beta))
    }

    /// Energies and their input gradients `∇ₓU`.
    pub fn energy_grad(&self, params: &ParamVector, x: ArrayView2<f64>, t: f64, beta: f64) -> (Vec<f64>, Array2<f64>) {
        let rc = self.coeffs_at(x.nrows(), t, beta);
        let mut g = Graph::new();
        let p = params.leaves(&mut g);
        let xv = g.leaf(x.to_owned());
        let u = self.energy_graph(&mut g, &p, xv, &rc);
        let gx = g.grad(u, None, &[xv])[0];
        (g.value(u).iter().copied().collect(), g.value(gx).clone())
    }

    /// `∂U/∂t` by central differences with step `h` in reverse time.
    pub fn energy_time_derivative(&self, params: &ParamVector, x: ArrayView2<f64>, t: f64, beta: f64, h: f64) -> Vec<f64> {
        let up = self.energy(params, x, t + h, beta);
        let um = self.energy(params, x, t - h, beta);
        up.iter().zip(&um).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    /// Score rows and their divergences.
    pub fn score_divergence<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        x: ArrayView2<f64>,
        t: f64,
        beta: f64,
        method: Divergence,
        exact_cap: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let rc = self.coeffs_at(x.nrows(), t, beta);
        let mut g = Graph::new();
        let p = params.leaves(&mut g);
        let xv = g.leaf(x.to_owned());
        let s = self.score_graph(&mut g, &p, xv, &rc);
        let score = g.value(s).clone();
        let div = divergence_on_graph(&mut g, s, xv, method, exact_cap, rng)?;
        Ok((score, div))
    }
}

/// Row-wise divergence of `y = f(x)` (both `n×d`, rows independent).
pub fn divergence_on_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    y: Var,
    x: Var,
    method: Divergence,
    exact_cap: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (n, d) = g.value(x).dim();
    let mut div = vec![0.0; n];
    match method {
        Divergence::Exact => {
            if d > exact_cap {
                return Err(PitaError::Config(format!(
                    "exact divergence limited to dim <= {exact_cap}, got {d}; use hutchinson"
                )));
            }
            for i in 0..d {
                let mut e = Array2::zeros((n, d));
                e.column_mut(i).fill(1.0);
                let seed = g.leaf(e);
                let gx = g.grad(y, Some(seed), &[x])[0];
                for (r, v) in div.iter_mut().enumerate() {
                    *v += g.value(gx)[[r, i]];
                }
            }
        }
        Divergence::Hutchinson { n_probes } => {
            let n_probes = n_probes.max(1);
            for _ in 0..n_probes {
                let v = Array2::from_shape_simple_fn((n, d), || if rng.random::<bool>() { 1.0 } else { -1.0 });
                let seed = g.leaf(v.clone());
                let gx = g.grad(y, Some(seed), &[x])[0];
                let vjp = g.value(gx);
                for (r, acc) in div.iter_mut().enumerate() {
                    *acc += vjp.row(r).dot(&v.row(r));
                }
            }
            for v in &mut div {
                *v /= n_probes as f64;
            }
        }
    }
    Ok(div)
}
