//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps), evaluated by
//! the f64 replay of the recorded graph, compared element-wise against
//! `backward` gradients. Pass iff |a - n| <= max(rtol * max(|a|, |n|), floor)
//! for every element, with rtol 1e-3 and absolute floor 1e-5.

use std::collections::HashMap;

use super::array::Array;
use super::replay::eval_f64;
use crate::error::{Error, Result};

pub const GRAD_RTOL: f64 = 1e-3;
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Elements checked across all parameters.
    pub checked: usize,
}

/// Check d f / d x for a scalar-valued `f` of a single input.
pub fn grad_check(f: &dyn Fn(&Array) -> Result<Array>, x: &Array, eps: f64) -> Result<GradReport> {
    assert!(eps > 0.0, "eps must be positive");
    x.set_requires_grad(true);
    grad_check_params(&|| f(x), &[("x", x.clone())], eps)
}

/// Check d f / d p for every listed parameter of a scalar-valued closure.
/// The closure must be deterministic; any randomness has to be drawn ahead
/// of time and captured as constants.
pub fn grad_check_params(
    f: &dyn Fn() -> Result<Array>,
    params: &[(&str, Array)],
    eps: f64,
) -> Result<GradReport> {
    let loss_a = f()?;
    if loss_a.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss_a.shape().to_vec(),
        });
    }
    for (_, p) in params {
        p.zero_grad();
    }
    let loss_b = f()?;
    if loss_a.item().to_bits() != loss_b.item().to_bits() {
        return Err(Error::NonDeterministicF);
    }
    loss_b.backward()?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let f_plus = replay_scalar(&loss_a, p, plus);
            let f_minus = replay_scalar(&loss_a, p, minus);
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i] as f64;
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR / GRAD_RTOL);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > GRAD_RTOL {
                eprintln!(
                    "grad_check: {name}[{i}] analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
                );
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_err: max_rel,
        pass: max_rel <= GRAD_RTOL,
        checked,
    })
}

fn replay_scalar(loss: &Array, p: &Array, values: Vec<f64>) -> f64 {
    let mut overrides = HashMap::new();
    overrides.insert(p.node_id(), values);
    eval_f64(loss, &overrides)[0]
}
