//! Reverse-mode autodiff over a tape of dense matrices.
//!
//! The backward pass records its own operations on the same tape, so any
//! gradient it returns can be differentiated again. Every value is an
//! `Array2<f64>`; scalars are `1×1` and per-row quantities are `n×1`.

use ndarray::{Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `a (n×m) + b (1×m)` broadcast down the rows.
    AddRow(Var, Var),
    /// `a (n×m) * b (n×1)` broadcast across the columns.
    MulCol(Var, Var),
    Transpose(Var),
    /// Sum over rows, giving `1×m`.
    SumRows(Var),
    /// Sum over columns, giving `n×1`.
    SumCols(Var),
    /// `1×m` repeated to `n×m`.
    BroadcastRows(Var),
    /// `n×1` repeated to `n×m`.
    BroadcastCols(Var),
    Tanh(Var),
    Sigmoid(Var),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn column(&mut self, v: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape"))
    }

    /// A leaf holding the current value of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(Op::AddScalar(a), value)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::AddRow(a, b), value)
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(Op::MulCol(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), value)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumRows(a), value)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols(a), value)
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        let value = row.broadcast((n, row.ncols())).expect("1×m").to_owned();
        self.push(Op::BroadcastRows(a), value)
    }

    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Var {
        let col = self.value(a);
        let value = col.broadcast((col.nrows(), m)).expect("n×1").to_owned();
        self.push(Op::BroadcastCols(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let r = self.sum_rows(a);
        self.sum_cols(r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(a), value)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// Row-wise squared norms, `n×1`.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_cols(sq)
    }

    fn parents(op: Op) -> (Option<Var>, Option<Var>) {
        match op {
            Op::Leaf => (None, None),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulCol(a, b) => {
                (Some(a), Some(b))
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a) => (Some(a), None),
        }
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, g: Var) {
        adj[target.0] = Some(match adj[target.0] {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }

    /// Vector-Jacobian product: gradients of `Σ seed ⊙ y` with respect to
    /// each of `wrt`. A `None` seed means all ones, the gradient of the sum.
    ///
    /// Variables unreachable from `y` get a zero leaf of matching shape.
    pub fn grad(&mut self, y: Var, seed: Option<Var>, wrt: &[Var]) -> Vec<Var> {
        let end = y.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if needs[i] {
                continue;
            }
            let (a, b) = Self::parents(self.nodes[i].op);
            needs[i] = a.is_some_and(|a| needs[a.0]) || b.is_some_and(|b| needs[b.0]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        let seed = match seed {
            Some(s) => s,
            None => {
                let ones = Array2::ones(self.value(y).raw_dim());
                self.leaf(ones)
            }
        };
        if needs[y.0] {
            adj[y.0] = Some(seed);
        }

        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes[i].op;
            let need = |v: Var| needs[v.0];
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if need(a) {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if need(b) {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if need(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if need(b) {
                        self.accumulate(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if need(b) {
                        let gb = self.scale(g, -1.0);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if need(b) {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::AddScalar(a) => {
                    self.accumulate(&mut adj, a, g);
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::AddRow(a, b) => {
                    if need(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if need(b) {
                        let gb = self.sum_rows(g);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::MulCol(a, b) => {
                    if need(a) {
                        let ga = self.mul_col(g, b);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if need(b) {
                        let ga = self.mul(g, a);
                        let gb = self.sum_cols(ga);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::SumRows(a) => {
                    let n = self.value(a).nrows();
                    let ga = self.broadcast_rows(g, n);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumCols(a) => {
                    let m = self.value(a).ncols();
                    let ga = self.broadcast_cols(g, m);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastRows(a) => {
                    let ga = self.sum_rows(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastCols(a) => {
                    let ga = self.sum_cols(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    // 1 - y²
                    let y = Var(i);
                    let yy = self.mul(y, y);
                    let neg = self.scale(yy, -1.0);
                    let d = self.add_scalar(neg, 1.0);
                    let ga = self.mul(g, d);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sigmoid(a) => {
                    // y (1 - y)
                    let y = Var(i);
                    let neg = self.scale(y, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let d = self.mul(y, one_minus);
                    let ga = self.mul(g, d);
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Array2::zeros(self.value(*w).raw_dim());
                    self.leaf(z)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Array2<f64>) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let gx = g.grad(y, None, &[x])[0];
        let analytic = g.value(gx).clone();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xv = x0.clone();
                xv[[r, c]] += delta;
                let mut g = Graph::new();
                let x = g.leaf(xv);
                let y = build(&mut g, x);
                g.value(y).sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!((a - fd).abs() <= 1e-6 * fd.abs().max(1.0), "entry ({r},{c}): {a} vs {fd}");
        }
    }

    #[test]
    fn square_norm_gradient() {
        let mut g = Graph::new();
        let p = g.leaf(array![[3.0]]);
        let y = g.mul(p, p);
        let gp = g.grad(y, None, &[p])[0];
        assert_eq!(g.scalar(gp), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::new();
        let p = g.leaf(array![[1.0, 2.0]]);
        let c = g.leaf(array![[5.0]]);
        let gp = g.grad(c, None, &[p])[0];
        assert_eq!(g.value(gp), &array![[0.0, 0.0]]);
    }

    #[test]
    fn every_op_passes_fd() {
        let x0 = array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]];
        let w = array![[0.1, 0.4], [-0.3, 0.2], [0.7, -0.5]];
        let bias = array![[0.05, -0.1]];
        fd_check(
            move |g, x| {
                let wv = g.leaf(w.clone());
                let b = g.leaf(bias.clone());
                let h = g.matmul(x, wv);
                let h = g.add_row(h, b);
                let h = g.tanh(h);
                let s = g.silu(h);
                let col = g.sum_cols(s);
                let y = g.mul_col(x, col);
                let t = g.transpose(y);
                let r = g.sum_rows(t);
                let br = g.broadcast_rows(r, 4);
                let sc = g.scale(br, 0.5);
                let sh = g.add_scalar(sc, 2.0);
                let sq = g.mul(sh, sh);
                let d = g.sub(sq, br);
                let c2 = g.sum_cols(d);
                let bc = g.broadcast_cols(c2, 3);
                let sig = g.sigmoid(bc);
                g.add(sig, sig)
            },
            x0,
        );
    }

    #[test]
    fn second_derivative_through_backward() {
        // f(x) = Σ x³/3 ⇒ ∇f = x², and ∇(Σ ∇f) = 2x
        let mut g = Graph::new();
        let x = g.leaf(array![[1.5, -2.0]]);
        let x2 = g.mul(x, x);
        let x3 = g.mul(x2, x);
        let f = g.scale(x3, 1.0 / 3.0);
        let gx = g.grad(f, None, &[x])[0];
        for (a, b) in g.value(gx).iter().zip([2.25, 4.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        let ggx = g.grad(gx, None, &[x])[0];
        for (a, b) in g.value(ggx).iter().zip([3.0, -4.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[2.0]]);
        let y = g.mul(x, x);
        let d = g.detach(y);
        let z = g.mul(d, x);
        let gx = g.grad(z, None, &[x])[0];
        assert_eq!(g.scalar(gx), 4.0);
    }

    #[test]
    fn seeded_vjp_selects_a_column() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let y = g.mul(x, x);
        let seed = g.leaf(array![[1.0, 0.0], [1.0, 0.0]]);
        let gx = g.grad(y, Some(seed), &[x])[0];
        assert_eq!(g.value(gx), &array![[2.0, 0.0], [6.0, 0.0]]);
    }
}
