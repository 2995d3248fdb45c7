//! Numeric substrate for every learned component: matrices, a reverse-mode
//! tape, dense networks, Gaussian heads and an Adam optimizer.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod mlp;
mod params;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{read_params, write_params};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{forward_mlp, Activation, Mlp, MlpSpec};
pub use params::{ParamOwner, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

/// Lower bound applied to every predicted log-variance.
pub const MIN_LOG_VAR: f64 = -10.0;
/// Upper bound applied to every predicted log-variance.
pub const MAX_LOG_VAR: f64 = 4.0;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called on a node that was never recorded")]
    NoForward,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0} needs at least one operand")]
    Empty(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Smoothly squashes raw log-variances into `[MIN_LOG_VAR, MAX_LOG_VAR]`.
pub fn soft_clamp_log_var(g: &mut Graph, raw: Var) -> Var {
    // max - softplus(max - x)
    let t = g.scale(raw, -1.0);
    let t = g.add_scalar(t, MAX_LOG_VAR);
    let t = g.softplus(t);
    let upper = g.scale(t, -1.0);
    let upper = g.add_scalar(upper, MAX_LOG_VAR);
    // min + softplus(x - min)
    let t = g.add_scalar(upper, -MIN_LOG_VAR);
    let t = g.softplus(t);
    g.add_scalar(t, MIN_LOG_VAR)
}

/// Same mapping as [`soft_clamp_log_var`] on a plain value.
pub fn soft_clamp_log_var_value(x: f64) -> f64 {
    let upper = MAX_LOG_VAR - tensor::softplus(MAX_LOG_VAR - x);
    MIN_LOG_VAR + tensor::softplus(upper - MIN_LOG_VAR)
}

/// Mean over all elements of `½(log σ² + (μ − t)² / σ²)`.
pub fn gaussian_nll(g: &mut Graph, mean: Var, log_var: Var, target: Var) -> Result<Var, NnError> {
    let diff = g.sub(mean, target)?;
    let sq = g.square(diff);
    let neg_lv = g.neg(log_var);
    let inv_var = g.exp(neg_lv);
    let weighted = g.mul(sq, inv_var)?;
    let total = g.add(log_var, weighted)?;
    let m = g.mean(total);
    Ok(g.scale(m, 0.5))
}

/// Plain-value Gaussian negative log-likelihood, averaged over elements.
pub fn gaussian_nll_value(mean: &[f64], log_var: &[f64], target: &[f64]) -> f64 {
    assert!(mean.len() == log_var.len() && mean.len() == target.len());
    let s: f64 = mean
        .iter()
        .zip(log_var)
        .zip(target)
        .map(|((&m, &lv), &t)| lv + (m - t) * (m - t) * (-lv).exp())
        .sum();
    0.5 * s / mean.len() as f64
}

/// `mean + exp(½ log_var) ⊙ noise`, differentiable through mean and log-variance.
pub fn reparam_sample(g: &mut Graph, mean: Var, log_var: Var, noise: Var) -> Result<Var, NnError> {
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, noise)?;
    g.add(mean, scaled)
}

/// Plain-value reparameterized sample.
pub fn reparam_sample_value(mean: &[f64], log_var: &[f64], noise: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_var)
        .zip(noise)
        .map(|((&m, &lv), &n)| m + (0.5 * lv).exp() * n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nll(m: f64, lv: f64, t: f64) -> f64 {
        let mut g = Graph::new();
        let mv = g.constant(Tensor::scalar(m));
        let lvv = g.constant(Tensor::scalar(lv));
        let tv = g.constant(Tensor::scalar(t));
        let l = gaussian_nll(&mut g, mv, lvv, tv).unwrap();
        g.value(l).item()
    }

    #[test]
    fn gaussian_nll_unit_values() {
        assert!(nll(1.5, 0.0, 1.5).abs() < 1e-12);
        assert!((nll(2.0, 0.0, 1.0) - 0.5).abs() < 1e-12);
        assert!((nll(0.3, 1.0, 0.3) - 0.5).abs() < 1e-12);
        assert!((gaussian_nll_value(&[2.0], &[0.0], &[1.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_minimizers_by_scan() {
        let target = 0.7;
        let best_mu = (-200..=200)
            .map(|i| target + i as f64 * 0.01)
            .min_by(|a, b| nll(*a, 0.3, target).total_cmp(&nll(*b, 0.3, target)))
            .unwrap();
        assert!((best_mu - target).abs() < 1e-9);

        // over σ², the minimizer is (μ − t)²
        let mu = 1.9;
        let best_lv = (-400..=400)
            .map(|i| i as f64 * 0.005)
            .min_by(|a, b| nll(mu, *a, target).total_cmp(&nll(mu, *b, target)))
            .unwrap();
        let want = ((mu - target) * (mu - target)).ln();
        assert!((best_lv - want).abs() < 0.005 + 1e-9);
    }

    #[test]
    fn nll_gradient_vanishes_at_target() {
        let mut g = Graph::new();
        let m = g.param(Tensor::row(&[0.25, -1.0]));
        let lv = g.constant(Tensor::row(&[0.4, -0.2]));
        let t = g.constant(Tensor::row(&[0.25, -1.0]));
        let l = gaussian_nll(&mut g, m, lv, t).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(m).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn reparam_basic_cases() {
        assert_eq!(reparam_sample_value(&[1.0, 2.0], &[0.3, -1.0], &[0.0, 0.0]), vec![1.0, 2.0]);
        assert_eq!(reparam_sample_value(&[1.0], &[0.0], &[0.5]), vec![1.5]);

        let mut g = Graph::new();
        let mean = g.param(Tensor::row(&[0.1, 0.2, 0.3]));
        let lv = g.param(Tensor::row(&[0.0, 1.0, -1.0]));
        let noise = g.constant(Tensor::row(&[0.3, -0.7, 1.1]));
        let w = g.constant(Tensor::row(&[2.0, -3.0, 0.5]));
        let s = reparam_sample(&mut g, mean, lv, noise).unwrap();
        let sw = g.mul(s, w).unwrap();
        let l = g.sum(sw);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(mean).data(), &[2.0, -3.0, 0.5]);
    }

    #[test]
    fn soft_clamp_stays_in_bounds() {
        for x in [-1e6, -50.0, -10.0, 0.0, 3.9, 4.0, 50.0, 1e6] {
            let y = soft_clamp_log_var_value(x);
            // the two softplus stages can overshoot by ~1e-6
            assert!((MIN_LOG_VAR - 1e-5..=MAX_LOG_VAR + 1e-5).contains(&y), "{x} -> {y}");
        }
        assert!((soft_clamp_log_var_value(0.0) - 0.0).abs() < 0.05);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[-30.0, 0.0, 30.0]));
        let y = soft_clamp_log_var(&mut g, x);
        for (a, b) in g.value(y).data().iter().zip([-30.0, 0.0, 30.0]) {
            assert_eq!(*a, soft_clamp_log_var_value(b));
        }
    }
}
