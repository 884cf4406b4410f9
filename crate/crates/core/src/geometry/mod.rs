//! Loss-geometry analyses.
//!
//! Rays through weight space, prediction diversity, ensembling and
//! averaging gains, gradient statistics, a finite-difference Hutchinson
//! estimator of the input-Jacobian norm with its exact oracle, a
//! Gauss-Newton split of the Hessian trace, and a Monte-Carlo model of
//! averaging Gaussian iterates collected at two learning rates.
//!
//! Every routine is a pure function of its arguments and seeds.

mod gains;
mod gradients;
mod hessian;
mod iterates;
mod jacobian;
mod rays;
pub mod report;

pub use gains::{average_gain, diversity, ensemble_gain, ensemble_gain_of};
pub use gradients::{grad_cov_trace, grad_cov_trace_of, grad_norms};
pub use hessian::{
    half_squared_error, hessian_trace_decomposition, ray_sharpness_expansion_check, HessianDecomp,
    SharpnessCheck,
};
pub use iterates::{
    crossover_bracket, gaussian_iterate_mse_sim, CrossoverReport, IterateSimReport, IterateSimSpec,
};
pub use jacobian::{
    estimator_variance_check, exact_jacobian_frobenius, jacobian_trace_estimate, weight_jacobian,
    JacobianWrt, MatrixField, TraceEstimate, TraceOptions, VarianceReport,
};
pub use rays::{
    adversarial_direction, cross_entropy, ray_profile, DirectionKind, EvalSet, RayPoint, RayProfile,
    RaySpec, RaySplit,
};
