//! Combination weights for many forecasts from a sparse-plus-low-rank
//! estimate of the precision matrix of their errors.
//!
//! The errors are modelled as `e_t = B f_t + ε_t` with a few common factors
//! and a sparse precision for `ε_t`. [`factor_glasso`] estimates the factors
//! by PCA, the idiosyncratic precision by a weighted graphical lasso
//! ([`glasso`]) and recombines the two with Sherman-Morrison-Woodbury.
//! [`rd_factor_glasso`] lets the idiosyncratic precision change at known
//! break dates, solving a joint problem with [`regime`]'s ADMM. Weights are
//! `Θ 1 / 1'Θ 1` ([`combination`]).
//!
//! [`estimator`] puts all methods behind one call, [`backtest`] runs them
//! on a rolling window and [`simulation`] holds the Monte Carlo designs.
//!
//! ```
//! use fglasso::combination::weights_from_precision;
//! use fglasso::factor_glasso::{factor_glasso_fit, FactorGlassoConfig};
//! use fglasso::simulation::dgp::{simulate_factor_errors, FactorErrorDgpSpec};
//! use fglasso::simulation::monte_carlo::replication_rng;
//!
//! let spec = FactorErrorDgpSpec::for_t(64);
//! let sample = simulate_factor_errors(&spec, &mut replication_rng(1, 64, 0))?;
//! let fit = factor_glasso_fit(&sample.errors, &FactorGlassoConfig::default())?;
//! let w = weights_from_precision(&fit.theta_hat, "factor_glasso")?;
//! assert!((w.sum() - 1.0).abs() < 1e-12);
//! # Ok::<(), fglasso::Error>(())
//! ```

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod combination;
pub mod error;
pub mod estimator;
pub mod factor;
pub mod factor_glasso;
pub mod glasso;
pub mod matrix;
pub mod panel;
pub mod rd_factor_glasso;
pub mod regime;
pub mod simulation;

pub use error::{Error, Result};

/// The linear algebra types used throughout the public API.
pub use nalgebra;
