//! Approximate factor model for forecast errors, estimated by principal
//! components under the identification `B'B = I_q`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    inverse_conditioned, sample_covariance, symmetric_eigen, PrecisionEstimate, SymmetricMatrix,
};

/// Σ̂_f is rejected as singular above this condition number.
pub const MAX_FACTOR_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorOptions {
    /// Subtract column means before PCA. Off by default: forecast errors are
    /// modelled as mean zero.
    pub demean: bool,
}

/// `e_t = B f_t + ε_t` fitted by PCA.
#[derive(Debug, Clone)]
pub struct FactorDecomposition {
    /// `p × q`, orthonormal columns.
    pub loadings: DMatrix<f64>,
    /// `T × q`, row `t` is `f̂_t' = (B̂' e_t)'`.
    pub factors: DMatrix<f64>,
    /// `T × p`, row `t` is `(e_t - B̂ f̂_t)'`.
    pub residuals: DMatrix<f64>,
    pub q: usize,
    pub sigma_f: SymmetricMatrix,
    pub theta_f: PrecisionEstimate,
    /// All eigenvalues of `(1/T) Σ e_t e_t'`, descending.
    pub eigenvalues: Vec<f64>,
}

impl FactorDecomposition {
    /// `(1/T) Σ ε̂_t ε̂_t'`.
    pub fn residual_covariance(&self) -> Result<SymmetricMatrix> {
        sample_covariance(&self.residuals)
    }
}

fn prepare(errors: &DMatrix<f64>, opts: &FactorOptions) -> Result<DMatrix<f64>> {
    if errors.nrows() < 2 || errors.ncols() < 2 {
        return Err(Error::Dimension(format!(
            "factor model needs T >= 2 and p >= 2, got {}x{}",
            errors.nrows(),
            errors.ncols()
        )));
    }
    if let Some(v) = errors.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite forecast error {v}")));
    }
    let mut e = errors.clone();
    if opts.demean {
        for mut col in e.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
    Ok(e)
}

fn check_q(q: usize, t: usize, p: usize) -> Result<()> {
    if q == 0 || q >= t.min(p) {
        return Err(Error::InvalidParameter(format!(
            "number of factors must satisfy 1 <= q < min(T, p) = {}, got {q}",
            t.min(p)
        )));
    }
    Ok(())
}

/// Estimates `q` factors from a `T × p` matrix of forecast errors.
pub fn estimate_factors(
    errors: &DMatrix<f64>,
    q: usize,
    opts: &FactorOptions,
) -> Result<FactorDecomposition> {
    let e = prepare(errors, opts)?;
    let (t, p) = e.shape();
    check_q(q, t, p)?;

    let cov = sample_covariance(&e)?;
    let eig = symmetric_eigen(&cov)?;
    let loadings = eig.vectors.columns(0, q).into_owned();
    let factors = &e * &loadings;
    let residuals = &e - &factors * loadings.transpose();
    let sigma_f = sample_covariance(&factors)?;
    let theta_f = inverse_conditioned(&sigma_f, MAX_FACTOR_CONDITION)?;
    let theta_f = PrecisionEstimate::certified(theta_f, 0.0)?;
    Ok(FactorDecomposition {
        loadings,
        factors,
        residuals,
        q,
        sigma_f,
        theta_f,
        eigenvalues: eig.values.iter().copied().collect(),
    })
}

/// Mean squared residual `V(k)` for `k = 1..=k_max`, from the eigenvalues of
/// the error covariance: `V(k) = (trace S - Σ_{i≤k} λ_i) / p`.
pub fn residual_variances(
    errors: &DMatrix<f64>,
    k_max: usize,
    opts: &FactorOptions,
) -> Result<Vec<f64>> {
    let e = prepare(errors, opts)?;
    let p = e.ncols();
    let cov = sample_covariance(&e)?;
    let eig = symmetric_eigen(&cov)?;
    let total = cov.trace();
    let mut explained = 0.0;
    Ok((1..=k_max.min(p))
        .map(|k| {
            explained += eig.values[k - 1];
            ((total - explained) / p as f64).max(0.0)
        })
        .collect())
}

/// `IC1(k) = ln V(k) + k (p+T)/(pT) ln(pT/(p+T))`.
pub fn ic1(v_k: f64, k: usize, t: usize, p: usize) -> f64 {
    let (tf, pf) = (t as f64, p as f64);
    let penalty = (pf + tf) / (pf * tf) * (pf * tf / (pf + tf)).ln();
    v_k.ln() + k as f64 * penalty
}

/// Number of factors minimizing IC1 over `1..=q_max`.
pub fn select_num_factors(
    errors: &DMatrix<f64>,
    q_max: usize,
    opts: &FactorOptions,
) -> Result<usize> {
    let (t, p) = errors.shape();
    check_q(q_max, t, p)?;
    let v = residual_variances(errors, q_max, opts)?;
    let mut best = (1, f64::INFINITY);
    for (i, &vk) in v.iter().enumerate() {
        let k = i + 1;
        // V(k) = 0 means an exact k-factor fit; ln → -∞ wins outright.
        let score = if vk > 0.0 {
            ic1(vk, k, t, p)
        } else {
            f64::NEG_INFINITY
        };
        if score < best.1 {
            best = (k, score);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(t: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed | 1;
        DMatrix::from_fn(t, p, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    #[test]
    fn noiseless_factor_structure_has_zero_residuals() {
        let (t, p, q) = (60, 8, 2);
        let f = pseudo(t, q, 3);
        let b = pseudo(p, q, 5);
        let e = &f * b.transpose();
        let d = estimate_factors(&e, q, &FactorOptions::default()).unwrap();
        assert!(d.residuals.abs().max() < 1e-10);
    }

    #[test]
    fn loadings_are_orthonormal_and_residuals_orthogonal() {
        let e = pseudo(50, 7, 9);
        for q in 1..6 {
            let d = estimate_factors(&e, q, &FactorOptions::default()).unwrap();
            let btb = d.loadings.transpose() * &d.loadings;
            assert!((btb - DMatrix::<f64>::identity(q, q)).abs().max() < 1e-10);
            let cross = d.factors.transpose() * &d.residuals / 50.0;
            assert!(cross.abs().max() < 1e-8);
            let rebuilt = &d.factors * d.loadings.transpose() + &d.residuals;
            assert!((rebuilt - &e).abs().max() < 1e-12);
        }
    }

    #[test]
    fn residual_trace_equals_tail_eigenvalues() {
        let e = pseudo(40, 6, 17);
        let q = 5;
        let d = estimate_factors(&e, q, &FactorOptions::default()).unwrap();
        let tail: f64 = d.eigenvalues[q..].iter().sum();
        let rc = d.residual_covariance().unwrap();
        assert!((rc.trace() - tail).abs() < 1e-8);
    }

    #[test]
    fn sigma_f_is_diagonal_of_leading_eigenvalues() {
        let e = pseudo(40, 6, 21);
        let d = estimate_factors(&e, 2, &FactorOptions::default()).unwrap();
        assert!((d.sigma_f.get(0, 0) - d.eigenvalues[0]).abs() < 1e-10);
        assert!(d.sigma_f.get(0, 1).abs() < 1e-10);
        assert!((d.theta_f.matrix().get(1, 1) * d.eigenvalues[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn q_out_of_range_is_rejected() {
        let e = pseudo(10, 4, 1);
        for q in [0, 4, 5] {
            assert!(matches!(
                estimate_factors(&e, q, &FactorOptions::default()),
                Err(Error::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn residual_variance_is_nonincreasing_and_matches_direct_fit() {
        let e = pseudo(30, 6, 33);
        let v = residual_variances(&e, 5, &FactorOptions::default()).unwrap();
        assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        for (i, vk) in v.iter().enumerate() {
            let d = estimate_factors(&e, i + 1, &FactorOptions::default()).unwrap();
            let direct = d.residuals.norm_squared() / (30.0 * 6.0);
            assert!((direct - vk).abs() < 1e-12);
        }
    }

    #[test]
    fn single_candidate_returns_one() {
        let e = pseudo(30, 6, 7);
        assert_eq!(
            select_num_factors(&e, 1, &FactorOptions::default()).unwrap(),
            1
        );
    }

    #[test]
    fn demeaning_removes_column_means() {
        let mut e = pseudo(30, 4, 77);
        e.column_mut(2).add_scalar_mut(10.0);
        let d = estimate_factors(&e, 1, &FactorOptions { demean: true }).unwrap();
        // Without demeaning the shifted column would dominate the first PC.
        assert!(d.loadings[(2, 0)].abs() < 0.99);
        let raw = estimate_factors(&e, 1, &FactorOptions::default()).unwrap();
        assert!(raw.loadings[(2, 0)].abs() > 0.99);
    }
}
