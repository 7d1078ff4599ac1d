//! One entry point for every combination method, so the Monte Carlo
//! harness, the rolling backtest and the command line share the same
//! estimation path.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::combination::{ew_precision_benchmark, weights_from_precision, CombinationWeights};
use crate::error::{Error, Result};
use crate::factor_glasso::{factor_glasso_fit, not_sparse_fit, FactorCount, FactorGlassoConfig};
use crate::glasso::glasso_tune;
use crate::matrix::{sample_covariance, PrecisionEstimate, SymmetricMatrix};
use crate::rd_factor_glasso::{rd_factor_glasso_tune, RdConfig};
use crate::regime::RegimeSegmentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ew,
    Glasso,
    FactorGlasso,
    RdFactorGlasso,
    NotSparse,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ew,
        Method::Glasso,
        Method::FactorGlasso,
        Method::RdFactorGlasso,
        Method::NotSparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ew => "ew",
            Method::Glasso => "glasso",
            Method::FactorGlasso => "factor_glasso",
            Method::RdFactorGlasso => "rd_factor_glasso",
            Method::NotSparse => "not_sparse",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))
    }
}

/// Settings for all methods. Plain GLASSO reuses the grid settings of
/// `factor_glasso` (grid size, ϑ, fixed τ, solver tolerances).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub factor_glasso: FactorGlassoConfig,
    pub rd: RdConfig,
}

impl EstimatorConfig {
    pub fn with_factors(q: FactorCount) -> Self {
        let mut cfg = EstimatorConfig::default();
        cfg.set_factors(q);
        cfg
    }

    pub fn set_factors(&mut self, q: FactorCount) {
        self.factor_glasso.factors = q;
        self.rd.factors = q;
    }
}

/// Weights for forecasting the period right after the sample.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub method: Method,
    pub weights: CombinationWeights,
    /// Precision of the forecast errors behind the weights (last regime for
    /// RD-Factor GLASSO).
    pub precision: PrecisionEstimate,
    pub converged: bool,
    /// Regime the weights belong to.
    pub regime: usize,
    /// Selected `(α, β)` of RD-Factor GLASSO.
    pub rd_pair: Option<(f64, f64)>,
}

fn require_pd(precision: &PrecisionEstimate, method: Method) -> Result<()> {
    if precision.is_pd_certified() {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite(format!(
            "{method} returned an indefinite precision"
        )))
    }
}

/// Estimates combination weights from a `T × p` error matrix. `seg` is only
/// used by RD-Factor GLASSO; the other methods pool the whole sample.
pub fn estimate(
    method: Method,
    errors: &DMatrix<f64>,
    seg: &RegimeSegmentation,
    cfg: &EstimatorConfig,
) -> Result<Estimate> {
    estimate_with_truth(method, errors, seg, cfg, None)
}

/// As [`estimate`], passing the true per-regime precisions to RD-Factor
/// GLASSO tuning (needed by [`RdCriterion::OperatorNormLoss`]).
///
/// [`RdCriterion::OperatorNormLoss`]: crate::rd_factor_glasso::RdCriterion::OperatorNormLoss
pub fn estimate_with_truth(
    method: Method,
    errors: &DMatrix<f64>,
    seg: &RegimeSegmentation,
    cfg: &EstimatorConfig,
    truth: Option<&[SymmetricMatrix]>,
) -> Result<Estimate> {
    let (t, p) = errors.shape();
    if p < 2 {
        return Err(Error::Dimension(format!(
            "need at least two forecasters, got {p}"
        )));
    }
    let done = |precision: PrecisionEstimate, regime: usize| -> Result<Estimate> {
        require_pd(&precision, method)?;
        let weights = weights_from_precision(&precision, method.name())?;
        Ok(Estimate {
            method,
            converged: precision.converged(),
            weights,
            precision,
            regime,
            rd_pair: None,
        })
    };
    match method {
        Method::Ew => {
            let precision = ew_precision_benchmark(errors)?;
            Ok(Estimate {
                method,
                weights: CombinationWeights::equal(p, method.name()),
                converged: true,
                precision,
                regime: 0,
                rd_pair: None,
            })
        }
        Method::Glasso => {
            let s = sample_covariance(errors)?;
            let grid = cfg.factor_glasso.tau_grid(&s, t)?;
            let tuned = glasso_tune(&s, t, &grid, &cfg.factor_glasso.glasso)?;
            done(tuned.precision, 0)
        }
        Method::FactorGlasso => done(factor_glasso_fit(errors, &cfg.factor_glasso)?.theta_hat, 0),
        Method::NotSparse => done(not_sparse_fit(errors, &cfg.factor_glasso)?.theta_hat, 0),
        Method::RdFactorGlasso => {
            let mut rd = cfg.rd.clone();
            if seg.n_regimes() == 1 {
                // β has no effect without a neighbouring regime.
                rd.beta_grid.truncate(1);
            }
            let tuned = rd_factor_glasso_tune(errors, seg, &rd, truth)?;
            let fit = tuned.fit;
            let regime = fit.thetas.len() - 1;
            let precision = fit.thetas[regime].clone();
            require_pd(&precision, method)?;
            let weights = fit.weights[regime].clone();
            Ok(Estimate {
                method,
                weights,
                precision,
                converged: fit.converged,
                regime,
                rd_pair: Some((fit.alpha, fit.beta)),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::dgp::{simulate_factor_errors, FactorErrorDgpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("lw".parse::<Method>().is_err());
    }

    #[test]
    fn every_method_returns_normalized_weights() {
        let spec = FactorErrorDgpSpec {
            p: Some(12),
            q: Some(2),
            edge_probability: Some(0.2),
            ..FactorErrorDgpSpec::with_break(80)
        };
        let s = simulate_factor_errors(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let cfg = EstimatorConfig::with_factors(FactorCount::Fixed(2));
        for m in Method::ALL {
            let est = estimate(m, &s.errors, &s.segmentation, &cfg).unwrap();
            assert!((est.weights.sum() - 1.0).abs() < 1e-12, "{m}");
            assert!(est.precision.is_pd_certified(), "{m}");
            assert_eq!(est.regime, if m == Method::RdFactorGlasso { 1 } else { 0 });
        }
    }
}
