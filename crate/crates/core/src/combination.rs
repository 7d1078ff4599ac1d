//! Combination weights from precision matrices, forecast scoring and the
//! Diebold-Mariano comparison.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::matrix::{
    max_abs, operator_norm, sample_covariance, PrecisionEstimate, SymmetricMatrix,
};

/// Minimum number of loss differentials for the Diebold-Mariano test.
pub const DM_MIN_OBS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationWeights {
    pub weights: Vec<f64>,
    pub method: String,
    pub regime: Option<usize>,
}

impl CombinationWeights {
    pub fn equal(p: usize, method: impl Into<String>) -> Self {
        CombinationWeights {
            weights: vec![1.0 / p as f64; p],
            method: method.into(),
            regime: None,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn with_regime(mut self, regime: usize) -> Self {
        self.regime = Some(regime);
        self
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `w = Θι / ι'Θι`.
pub fn weights_from_matrix(
    theta: &SymmetricMatrix,
    method: impl Into<String>,
) -> Result<CombinationWeights> {
    let m = theta.as_matrix();
    let row_sums: Vec<f64> = m.row_iter().map(|r| r.sum()).collect();
    let total: f64 = row_sums.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::NotPositiveDefinite(format!(
            "ι'Θι = {total} is not positive; weights are undefined"
        )));
    }
    Ok(CombinationWeights {
        weights: row_sums.into_iter().map(|s| s / total).collect(),
        method: method.into(),
        regime: None,
    })
}

pub fn weights_from_precision(
    theta: &PrecisionEstimate,
    method: impl Into<String>,
) -> Result<CombinationWeights> {
    weights_from_matrix(theta.matrix(), method)
}

/// `â = ι'Θι / p`.
pub fn a_hat(theta: &SymmetricMatrix) -> f64 {
    theta.as_matrix().sum() / theta.dim() as f64
}

/// `ŷ^c = w'ŷ`.
pub fn combined_forecast(forecasts: &[f64], w: &CombinationWeights) -> Result<f64> {
    if forecasts.len() != w.len() {
        return Err(Error::Dimension(format!(
            "{} forecasts but {} weights",
            forecasts.len(),
            w.len()
        )));
    }
    Ok(forecasts.iter().zip(&w.weights).map(|(f, w)| f * w).sum())
}

/// Population MSFE `w'Σw`.
pub fn msfe_population(w: &CombinationWeights, sigma: &SymmetricMatrix) -> Result<f64> {
    if sigma.dim() != w.len() {
        return Err(Error::Dimension(format!(
            "Σ is {0}x{0} but there are {1} weights",
            sigma.dim(),
            w.len()
        )));
    }
    let v = nalgebra::DVector::from_column_slice(&w.weights);
    Ok((v.transpose() * sigma.as_matrix() * &v)[(0, 0)])
}

/// Mean of squared combined forecast errors.
pub fn msfe_empirical(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64
}

/// Scaled identity `I/μ̄`, with `μ̄` the mean eigenvalue of the sample
/// covariance of `errors` (`T × p`). Always yields equal weights.
pub fn ew_precision_benchmark(errors: &DMatrix<f64>) -> Result<PrecisionEstimate> {
    if errors.nrows() < 2 {
        return Err(Error::Dimension(format!(
            "EW benchmark needs T >= 2, got {}",
            errors.nrows()
        )));
    }
    let s = sample_covariance(errors)?;
    let mu = s.trace() / s.dim() as f64;
    if !(mu > 0.0) {
        return Err(Error::Degenerate(
            "forecast errors have zero variance".into(),
        ));
    }
    let p = s.dim();
    PrecisionEstimate::certified(SymmetricMatrix::from_diagonal(&vec![1.0 / mu; p])?, 0.0)
}

/// `‖ŵ - w‖₁`.
pub fn weight_error_l1(w_hat: &CombinationWeights, w_true: &CombinationWeights) -> Result<f64> {
    if w_hat.len() != w_true.len() {
        return Err(Error::Dimension(format!(
            "weight vectors differ in length: {} vs {}",
            w_hat.len(),
            w_true.len()
        )));
    }
    Ok(w_hat
        .weights
        .iter()
        .zip(&w_true.weights)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixNorm {
    /// Largest singular value.
    Operator,
    Frobenius,
    /// Largest absolute entry.
    Max,
}

pub fn precision_error(
    theta_hat: &SymmetricMatrix,
    theta_true: &SymmetricMatrix,
    norm: MatrixNorm,
) -> Result<f64> {
    if theta_hat.dim() != theta_true.dim() {
        return Err(Error::Dimension(format!(
            "precision matrices differ in size: {} vs {}",
            theta_hat.dim(),
            theta_true.dim()
        )));
    }
    let d = theta_hat.as_matrix() - theta_true.as_matrix();
    Ok(match norm {
        MatrixNorm::Operator => operator_norm(&d),
        MatrixNorm::Frobenius => d.norm(),
        MatrixNorm::Max => max_abs(&d),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DieboldMariano {
    pub statistic: f64,
    /// One-sided: small values mean the first loss series is significantly
    /// smaller.
    pub pvalue: f64,
    /// The loss differential has zero variance.
    pub degenerate: bool,
}

/// Long-run variance of `d` with a Bartlett kernel and `lag` autocovariances.
pub fn bartlett_long_run_variance(d: &[f64], lag: usize) -> f64 {
    let h = d.len() as f64;
    let mean = d.iter().sum::<f64>() / h;
    let autocov = |k: usize| -> f64 {
        d[k..]
            .iter()
            .zip(d)
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / h
    };
    let mut v = autocov(0);
    for k in 1..=lag.min(d.len().saturating_sub(1)) {
        v += 2.0 * (1.0 - k as f64 / (lag as f64 + 1.0)) * autocov(k);
    }
    v
}

/// Tests `E[loss_a - loss_b] = 0` against `< 0` with a Bartlett HAC variance
/// using `horizon - 1` lags.
///
/// When the differential has zero variance the test is degenerate: the
/// p-value is 0 if `loss_a` is uniformly smaller and 1 otherwise.
pub fn diebold_mariano(loss_a: &[f64], loss_b: &[f64], horizon: usize) -> Result<DieboldMariano> {
    if loss_a.len() != loss_b.len() {
        return Err(Error::Dimension(format!(
            "loss series differ in length: {} vs {}",
            loss_a.len(),
            loss_b.len()
        )));
    }
    if loss_a.len() < DM_MIN_OBS {
        return Err(Error::InvalidParameter(format!(
            "Diebold-Mariano needs at least {DM_MIN_OBS} losses, got {}",
            loss_a.len()
        )));
    }
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    let h = d.len() as f64;
    let mean = d.iter().sum::<f64>() / h;
    let lrv = bartlett_long_run_variance(&d, horizon - 1);
    let scale = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !(lrv > 1e-28 * scale * scale) {
        let (statistic, pvalue) = if mean < 0.0 {
            (f64::NEG_INFINITY, 0.0)
        } else if mean > 0.0 {
            (f64::INFINITY, 1.0)
        } else {
            (0.0, 1.0)
        };
        return Ok(DieboldMariano {
            statistic,
            pvalue,
            degenerate: true,
        });
    }
    let statistic = mean / (lrv / h).sqrt();
    let pvalue = Normal::standard().cdf(statistic);
    Ok(DieboldMariano {
        statistic,
        pvalue,
        degenerate: false,
    })
}

/// Out-of-sample scores of one method against the EW benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub method: String,
    pub msfe: f64,
    pub msfe_ratio_to_ew: f64,
    pub dm_statistic: f64,
    pub dm_pvalue: f64,
    pub dm_degenerate: bool,
    pub weight_l1_error: Option<f64>,
    pub a_hat: f64,
    pub evaluations: usize,
}

/// Scores combined errors against the EW combined errors over the same
/// periods.
pub fn evaluate(
    method: &str,
    errors: &[f64],
    ew_errors: &[f64],
    horizon: usize,
    a_hat: f64,
) -> Result<EvaluationRecord> {
    if errors.len() != ew_errors.len() {
        return Err(Error::Dimension(
            "method and EW error series differ in length".into(),
        ));
    }
    let msfe = msfe_empirical(errors);
    let ew = msfe_empirical(ew_errors);
    let loss = |e: &[f64]| e.iter().map(|v| v * v).collect::<Vec<_>>();
    let (dm_statistic, dm_pvalue, dm_degenerate) = if errors.len() >= DM_MIN_OBS {
        let dm = diebold_mariano(&loss(errors), &loss(ew_errors), horizon)?;
        (dm.statistic, dm.pvalue, dm.degenerate)
    } else {
        (f64::NAN, f64::NAN, true)
    };
    Ok(EvaluationRecord {
        method: method.to_string(),
        msfe,
        msfe_ratio_to_ew: msfe / ew,
        dm_statistic,
        dm_pvalue,
        dm_degenerate,
        weight_l1_error: None,
        a_hat,
        evaluations: errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(rows: &[&[f64]]) -> SymmetricMatrix {
        SymmetricMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn weight_examples() {
        let w = weights_from_matrix(&SymmetricMatrix::identity(4), "x").unwrap();
        assert!(w.weights.iter().all(|v| (*v - 0.25).abs() < 1e-15));
        let w = weights_from_matrix(&SymmetricMatrix::from_diagonal(&[1.0, 3.0]).unwrap(), "x")
            .unwrap();
        assert_eq!(w.weights, vec![0.25, 0.75]);
        let w = weights_from_matrix(&sym(&[&[2.0, -1.0], &[-1.0, 2.0]]), "x").unwrap();
        assert_eq!(w.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn nonpositive_total_is_rejected() {
        let m = sym(&[&[1.0, -2.0], &[-2.0, 1.0]]);
        assert!(weights_from_matrix(&m, "x").is_err());
    }

    #[test]
    fn combined_forecast_examples() {
        let w = CombinationWeights {
            weights: vec![0.3, 0.7],
            method: "x".into(),
            regime: None,
        };
        assert!((combined_forecast(&[1.0, 2.0], &w).unwrap() - 1.7).abs() < 1e-15);
        assert!((combined_forecast(&[4.5, 4.5], &w).unwrap() - 4.5).abs() < 1e-15);
        let ew = CombinationWeights::equal(3, "ew");
        assert!((combined_forecast(&[1.0, 2.0, 6.0], &ew).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn msfe_examples() {
        let ew = CombinationWeights::equal(5, "ew");
        assert!((msfe_population(&ew, &SymmetricMatrix::identity(5)).unwrap() - 0.2).abs() < 1e-15);
        let half = CombinationWeights::equal(2, "ew");
        let s = sym(&[&[1.0, 0.5], &[0.5, 1.0]]);
        assert!((msfe_population(&half, &s).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(msfe_empirical(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn ew_benchmark_examples() {
        let r6 = 6f64.sqrt();
        let e = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, r6, 0.0, -r6]);
        // Sample covariance diag(0.5, 3) → μ̄ = 1.75.
        let est = ew_precision_benchmark(&e).unwrap();
        assert!((est.matrix().get(0, 0) - 1.0 / 1.75).abs() < 1e-15);
        assert_eq!(est.matrix().get(0, 1), 0.0);
        assert!(ew_precision_benchmark(&DMatrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn error_metrics() {
        let a = CombinationWeights {
            weights: vec![0.6, 0.4],
            method: "a".into(),
            regime: None,
        };
        let b = CombinationWeights {
            weights: vec![0.5, 0.5],
            method: "b".into(),
            regime: None,
        };
        assert!((weight_error_l1(&a, &b).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(weight_error_l1(&a, &a).unwrap(), 0.0);
        let x = SymmetricMatrix::from_diagonal(&[1.0, 1.3]).unwrap();
        let y = SymmetricMatrix::from_diagonal(&[1.0, 1.0]).unwrap();
        assert!((precision_error(&x, &y, MatrixNorm::Operator).unwrap() - 0.3).abs() < 1e-12);
        assert!((precision_error(&x, &y, MatrixNorm::Max).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn dm_identical_losses_are_degenerate() {
        let l = vec![1.0; 20];
        let dm = diebold_mariano(&l, &l, 1).unwrap();
        assert!(dm.degenerate);
        assert_eq!(dm.pvalue, 1.0);
    }

    #[test]
    fn dm_constant_improvement_is_decisive() {
        let b: Vec<f64> = (0..30).map(|i| 2.0 + (i as f64).sin()).collect();
        let a: Vec<f64> = b.iter().map(|v| v - 1.0).collect();
        let dm = diebold_mariano(&a, &b, 2).unwrap();
        assert!(dm.degenerate);
        assert_eq!(dm.statistic, f64::NEG_INFINITY);
        assert_eq!(dm.pvalue, 0.0);
    }

    #[test]
    fn dm_requires_enough_observations() {
        assert!(diebold_mariano(&[1.0; 5], &[2.0; 5], 1).is_err());
    }

    #[test]
    fn dm_sign_and_range() {
        let b: Vec<f64> = (0..40).map(|i| 1.0 + 0.3 * ((i * 7 % 11) as f64)).collect();
        let a: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(i, v)| v - 0.2 + 0.5 * (i as f64 * 1.3).sin())
            .collect();
        let dm = diebold_mariano(&a, &b, 3).unwrap();
        assert!(dm.statistic < 0.0 && dm.pvalue < 0.5 && dm.pvalue > 0.0);
        let rev = diebold_mariano(&b, &a, 3).unwrap();
        assert!((rev.statistic + dm.statistic).abs() < 1e-12);
        assert!((rev.pvalue + dm.pvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_against_self_has_unit_ratio() {
        let e: Vec<f64> = (0..15).map(|i| (i as f64 * 0.7).cos()).collect();
        let r = evaluate("ew", &e, &e, 1, 1.0).unwrap();
        assert_eq!(r.msfe_ratio_to_ew, 1.0);
        assert!(r.dm_degenerate);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn spd(p: usize, entries: &[f64]) -> SymmetricMatrix {
            let a = DMatrix::from_fn(p, p, |i, j| entries[i * 6 + j]);
            SymmetricMatrix::symmetrize(&a * a.transpose() + DMatrix::identity(p, p) * 0.1).unwrap()
        }

        proptest! {
            #[test]
            fn weights_sum_to_one_and_ignore_scale(
                p in 2usize..7,
                entries in prop::collection::vec(-2.0f64..2.0, 36),
                c in 0.01f64..100.0,
            ) {
                let theta = spd(p, &entries);
                let w = weights_from_matrix(&theta, "x").unwrap();
                prop_assert!((w.sum() - 1.0).abs() < 1e-12);
                let ws = weights_from_matrix(&theta.scaled(c), "x").unwrap();
                for (a, b) in w.weights.iter().zip(&ws.weights) {
                    prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
                }
            }

            #[test]
            fn dm_flips_sign_when_swapped(xs in prop::collection::vec(0.0f64..5.0, 20), ys in prop::collection::vec(0.0f64..5.0, 20)) {
                let ab = diebold_mariano(&xs, &ys, 2).unwrap();
                let ba = diebold_mariano(&ys, &xs, 2).unwrap();
                if !ab.degenerate {
                    prop_assert!((ab.statistic + ba.statistic).abs() < 1e-9);
                    prop_assert!((ab.pvalue + ba.pvalue - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
