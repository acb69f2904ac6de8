//! Numerics substrate: dense f32 arrays with reverse-mode differentiation,
//! a deterministic RNG, the Adam optimizer, and finite-difference gradient
//! verification.

mod array;
mod grad;
mod gradcheck;
mod ops;
mod params;
mod replay;
pub mod rng;

pub use array::{checked, no_grad, set_checked, Array};
pub use gradcheck::{grad_check, grad_check_params, GradReport, GRAD_FLOOR, GRAD_RTOL};
pub use params::{OptimizerState, ParamGroup, ParamStore};
pub use rng::Rng;
