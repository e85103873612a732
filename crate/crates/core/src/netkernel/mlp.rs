//! Flat parameter storage and the MLP backbone.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

/// Parameters of one network stored contiguously, with per-block shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerShape>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<LayerShape>) -> Self {
        let n = layout.iter().map(LayerShape::size).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout_is_consistent(&self) -> bool {
        self.values.len() == self.layout.iter().map(LayerShape::size).sum::<usize>()
    }

    /// Offsets of each block into `values`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layout.len());
        let mut acc = 0;
        for l in &self.layout {
            out.push(acc);
            acc += l.size();
        }
        out
    }

    pub fn block(&self, i: usize) -> ArrayView2<'_, f64> {
        let off = self.offsets()[i];
        let l = &self.layout[i];
        ArrayView2::from_shape((l.rows, l.cols), &self.values[off..off + l.size()]).expect("block shape")
    }

    /// Registers every block as a leaf on `g`.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        (0..self.layout.len()).map(|i| g.leaf(self.block(i).to_owned())).collect()
    }

    /// Gathers gradient blocks computed on `g` back into a flat vector.
    pub fn gather(&self, g: &Graph, grads: &[Var]) -> ParamVector {
        let mut out = Vec::with_capacity(self.values.len());
        for v in grads {
            out.extend(g.value(*v).iter().copied());
        }
        ParamVector {
            values: out,
            layout: self.layout.clone(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

/// Shape of an MLP `F(x, c)` with a separate first-layer block for the
/// conditioning features `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// When set, inputs are particle coordinates `(n, 3)` and are
    /// centered on their center of mass before the first layer.
    #[serde(default)]
    pub center_particles: Option<usize>,
    /// Adds a scalar head `o(c) = c·w + b` on the conditioning features.
    #[serde(default)]
    pub offset_head: bool,
}

impl MlpSpec {
    pub fn layout(&self) -> Vec<LayerShape> {
        let mut out = Vec::new();
        let shape = |name: String, rows, cols| LayerShape { name, rows, cols };
        let h0 = self.hidden.first().copied().unwrap_or(self.output_dim);
        out.push(shape("w0_x".into(), self.input_dim, h0));
        out.push(shape("w0_c".into(), self.cond_dim, h0));
        out.push(shape("b0".into(), 1, h0));
        for k in 1..self.hidden.len() {
            out.push(shape(format!("w{k}"), self.hidden[k - 1], self.hidden[k]));
            out.push(shape(format!("b{k}"), 1, self.hidden[k]));
        }
        if !self.hidden.is_empty() {
            let last = *self.hidden.last().unwrap();
            out.push(shape("w_out".into(), last, self.output_dim));
            out.push(shape("b_out".into(), 1, self.output_dim));
        }
        if self.offset_head {
            out.push(shape("off_w".into(), self.cond_dim, 1));
            out.push(shape("off_b".into(), 1, 1));
        }
        out
    }

    /// Normal init with variance `1/fan_in`; the output layer starts at zero
    /// so a fresh network has `F ≡ 0`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout());
        let offsets = p.offsets();
        for (i, l) in p.layout.clone().iter().enumerate() {
            let zero_init = matches!(l.name.as_str(), "w_out" | "off_w" | "off_b");
            if l.name.starts_with('b') || zero_init {
                continue;
            }
            // the two first-layer blocks share one fan-in
            let fan_in = if i < 2 { self.input_dim + self.cond_dim } else { l.rows };
            let std = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in &mut p.values[offsets[i]..offsets[i] + l.size()] {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        }
        p
    }

    /// Random weights everywhere, for derivative checks.
    pub fn init_dense<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout());
        for v in &mut p.values {
            let z: f64 = StandardNormal.sample(rng);
            *v = scale * z;
        }
        p
    }

    fn centering(&self, n: usize) -> Array2<f64> {
        let d = 3 * n;
        let mut m = Array2::zeros((d, d));
        for i in 0..n {
            for j in 0..n {
                let v = if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
                for k in 0..3 {
                    m[[3 * i + k, 3 * j + k]] = v;
                }
            }
        }
        m
    }

    fn act(&self, g: &mut Graph, v: Var) -> Var {
        match self.activation {
            Activation::Silu => g.silu(v),
            Activation::Tanh => g.tanh(v),
        }
    }

    /// Records `F(x, c)` on the graph; `p` are the leaves from
    /// [`ParamVector::leaves`].
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, cond: Var) -> Var {
        let x = match self.center_particles {
            Some(n) => {
                let c = g.leaf(self.centering(n));
                g.matmul(x, c)
            }
            None => x,
        };
        let hx = g.matmul(x, p[0]);
        let hc = g.matmul(cond, p[1]);
        let h = g.add(hx, hc);
        let mut h = g.add_row(h, p[2]);
        if self.hidden.is_empty() {
            return h;
        }
        h = self.act(g, h);
        let mut k = 3;
        for _ in 1..self.hidden.len() {
            let z = g.matmul(h, p[k]);
            let z = g.add_row(z, p[k + 1]);
            h = self.act(g, z);
            k += 2;
        }
        let out = g.matmul(h, p[k]);
        g.add_row(out, p[k + 1])
    }

    /// Records the scalar offset `n×1`; `None` without an offset head.
    pub fn offset(&self, g: &mut Graph, p: &[Var], cond: Var) -> Option<Var> {
        if !self.offset_head {
            return None;
        }
        let k = p.len() - 2;
        let o = g.matmul(cond, p[k]);
        Some(g.add_row(o, p[k + 1]))
    }

    /// Plain evaluation without keeping the tape.
    pub fn eval(&self, params: &ParamVector, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let p = params.leaves(&mut g);
        let xv = g.leaf(x.to_owned());
        let cv = g.leaf(cond.to_owned());
        let out = self.forward(&mut g, &p, xv, cv);
        g.value(out).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            cond_dim: 2,
            hidden: vec![8, 6],
            output_dim: 3,
            activation: Activation::Silu,
            center_particles: None,
            offset_head: false,
        }
    }

    #[test]
    fn layout_size_matches_values() {
        let s = spec();
        let p = s.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.layout_is_consistent());
        assert_eq!(p.len(), 3 * 8 + 2 * 8 + 8 + 8 * 6 + 6 + 6 * 3 + 3);
    }

    #[test]
    fn fresh_network_outputs_zero() {
        let s = spec();
        let p = s.init(&mut ChaCha8Rng::seed_from_u64(0));
        let x = Array2::from_elem((4, 3), 0.7);
        let c = Array2::from_elem((4, 2), 0.1);
        assert!(s.eval(&p, x.view(), c.view()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn param_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Silu, Activation::Tanh] {
            let s = MlpSpec { activation: act, ..spec() };
            let params = s.init_dense(&mut rng, 0.5);
            let x = s.init_dense(&mut rng, 1.0).values[..15].to_vec();
            let x = Array2::from_shape_vec((5, 3), x).unwrap();
            let c = Array2::from_shape_fn((5, 2), |(i, j)| 0.1 * (i + j) as f64);
            let loss = |pv: &ParamVector| -> (f64, ParamVector) {
                let mut g = Graph::new();
                let p = pv.leaves(&mut g);
                let xv = g.leaf(x.clone());
                let cv = g.leaf(c.clone());
                let f = s.forward(&mut g, &p, xv, cv);
                let sq = g.mul(f, f);
                let l = g.sum_all(sq);
                let grads = g.grad(l, None, &p);
                (g.scalar(l), pv.gather(&g, &grads))
            };
            let (_, grad) = loss(&params);
            let h = 1e-6;
            for idx in (0..params.len()).step_by(7) {
                let mut pp = params.clone();
                pp.values[idx] += h;
                let mut pm = params.clone();
                pm.values[idx] -= h;
                let fd = (loss(&pp).0 - loss(&pm).0) / (2.0 * h);
                let a = grad.values[idx];
                assert!((a - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{act:?} idx {idx}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn centering_makes_output_translation_invariant() {
        let s = MlpSpec {
            input_dim: 6,
            cond_dim: 1,
            hidden: vec![5],
            output_dim: 6,
            activation: Activation::Silu,
            center_particles: Some(2),
            offset_head: false,
        };
        let p = s.init_dense(&mut ChaCha8Rng::seed_from_u64(2), 0.5);
        let x = Array2::from_shape_vec((1, 6), vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let c = Array2::zeros((1, 1));
        let a = s.eval(&p, x.view(), c.view());
        let b = s.eval(&p, (&x + 3.0).view(), c.view());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
