//! Central finite-difference verification of graph gradients.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `‖analytic - numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub norm_rel_error: f64,
    pub checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error floor as a fraction of the largest numeric gradient, so that
/// entries that are zero up to rounding do not dominate.
const FLOOR_FRACTION: f64 = 1e-3;

pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheck {
    let scale = numeric.iter().chain(&analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * FLOOR_FRACTION).max(1e-12);
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    GradCheck {
        max_rel_error,
        norm_rel_error: diff / na.max(nn).max(1e-300),
        checked: analytic.len(),
        analytic,
        numeric,
    }
}

/// Checks every entry of the gradient of `f` with respect to its input.
pub fn check_gradient<F>(x0: &Tensor, eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x0.len()).collect();
    check_gradient_at(x0, &all, eps, f)
}

/// Checks the gradient entries listed in `indices`.
pub fn check_gradient_at<F>(x0: &Tensor, indices: &[usize], eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: Tensor| -> f64 {
        let mut g = Graph::new();
        let v = g.constant(x);
        let out = f(&mut g, v).expect("gradcheck function failed");
        g.scalar(out)
    };
    let mut g = Graph::new();
    let v = g.leaf(x0.clone());
    let out = f(&mut g, v).expect("gradcheck function failed");
    let grads = g.backward(out);
    let full = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
    let analytic: Vec<f64> = indices.iter().map(|&i| full.data()[i]).collect();
    let numeric = indices
        .iter()
        .map(|&i| {
            let mut hi = x0.clone();
            hi.data_mut()[i] += eps;
            let mut lo = x0.clone();
            lo.data_mut()[i] -= eps;
            (eval(hi) - eval(lo)) / (2.0 * eps)
        })
        .collect();
    compare(analytic, numeric)
}
