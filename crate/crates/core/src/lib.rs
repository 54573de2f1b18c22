//! Tuning the penalty weight of Lasso and Group Lasso regression by
//! hyper-subgradient descent on the leave-one-out validation error.
//!
//! The weights are fitted by proximal gradient descent; the sensitivity of
//! the fitted weights to λ is read off the fixed-point equation of that
//! iteration, which needs only sub-Jacobians of the prox operator.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod hypergrad;
pub mod prox;
pub mod solver;
pub mod validation;

pub use data::{
    compute_stats, generate_synthetic, load_csv, loo_downdate, spectral_radius, Dataset,
    SufficientStats, SyntheticData, SyntheticSpec,
};
pub use error::{Error, Result};
pub use hypergrad::{
    fd_hypergradient, hsgd_run, ohsgd_run, HyperConfig, HyperRecord, HyperTrajectory, ZMode,
};
pub use prox::{GroupStructure, Regularizer, SubJacobian};
pub use solver::{pgd_solve, InnerConfig, PgdConfig, PgdResult};
pub use validation::{
    grid_search, make_folds, validation_error, ErrorCurve, FoldSet, Problem, ValidationScheme,
};
