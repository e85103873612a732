//! Dense tensors with reverse-mode autodiff, MLP backbones and the
//! preconditioned heads.

pub mod checkpoint;
pub mod fields;
pub mod graph;
pub mod heads;
pub mod mlp;

use ndarray::{Array2, ArrayView2};

pub use checkpoint::{Checkpoint, Role};
pub use fields::{EnergyField, GaussianField, NetEnergy, NetScore, ScoreField};
pub use graph::{Graph, Var};
pub use heads::{Divergence, HeadBeta, HeadConfig, NetArch, PrecondA, Preconditioner};
pub use mlp::{Activation, LayerShape, MlpSpec, ParamVector};

use crate::error::{PitaError, Result};

/// Loss and parameter gradient.
///
/// `loss_fn` records per-example contributions as an `n×1` column; the
/// total loss is their sum. A non-finite contribution is reported with the
/// index of the first offending row.
pub fn grad_params(params: &ParamVector, loss_fn: impl FnOnce(&mut Graph, &[Var]) -> Var) -> Result<(f64, ParamVector)> {
    let mut g = Graph::new();
    let p = params.leaves(&mut g);
    let per_row = loss_fn(&mut g, &p);
    if let Some(i) = g.value(per_row).iter().position(|v| !v.is_finite()) {
        return Err(PitaError::NumericalError {
            batch_index: i,
            what: "non-finite loss".into(),
        });
    }
    let total = g.sum_all(per_row);
    let grads = g.grad(total, None, &p);
    let grad = params.gather(&g, &grads);
    Ok((g.scalar(total), grad))
}

/// `∇ₓ Σ_rows f(x)` for a scalar-per-row function recorded on the graph.
pub fn grad_input(f: impl FnOnce(&mut Graph, Var) -> Var, x: ArrayView2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let xv = g.leaf(x.to_owned());
    let y = f(&mut g, xv);
    let gx = g.grad(y, None, &[xv])[0];
    g.value(gx).clone()
}

/// Central difference in time with step `h`.
pub fn time_deriv(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
    (f(t + h) - f(t - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn half_square_norm_gradient_is_identity() {
        let gx = grad_input(
            |g, x| {
                let n = g.row_sq_norm(x);
                g.scale(n, 0.5)
            },
            array![[1.0, 2.0]].view(),
        );
        assert_eq!(gx, array![[1.0, 2.0]]);
    }

    #[test]
    fn time_derivative_hand_example() {
        // f(x, t) = t² ||x||² at t = 0.5, x = (1, 0)
        let d = time_deriv(|t| t * t * 1.0, 0.5, 1e-4);
        assert!((d - 1.0).abs() < 1e-10);
    }

    #[test]
    fn non_finite_loss_reports_row() {
        let p = ParamVector::zeros(vec![LayerShape {
            name: "w".into(),
            rows: 1,
            cols: 1,
        }]);
        let err = grad_params(&p, |g, _| g.leaf(array![[1.0], [f64::NAN], [2.0]])).unwrap_err();
        assert!(matches!(err, PitaError::NumericalError { batch_index: 1, .. }));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = ParamVector {
            values: vec![0.5, 1.5],
            layout: vec![LayerShape {
                name: "w".into(),
                rows: 1,
                cols: 2,
            }],
        };
        let (l, g) = grad_params(&p, |g, _| g.leaf(array![[3.0]])).unwrap();
        assert_eq!(l, 3.0);
        assert_eq!(g.values, vec![0.0, 0.0]);
    }
}
