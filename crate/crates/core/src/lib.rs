//! Gradient-attribution robustness laboratory.
//!
//! Reverse-mode differentiation ([`autodiff`]) underpins dense classifiers
//! ([`nn`]), four gradient attribution methods ([`attribution`]), attacks on
//! those attributions ([`attacks`]), similarity metrics ([`metrics`]),
//! closed-form input-Hessian geometry and sampled robustness estimators
//! ([`geometry`]), curvature-regularized training ([`training`]) and the
//! experiment drivers behind the `smoothgeo` CLI ([`harness`]).

pub mod autodiff;
pub mod linalg;
pub mod nn;
pub mod par;
pub mod rng;
pub mod attribution;
pub mod metrics;
pub mod geometry;
pub mod attacks;
pub mod training;
pub mod harness;
