//! Factor GLASSO: PCA factors, a sparse idiosyncratic precision from the
//! weighted GLASSO, and Sherman-Morrison-Woodbury recombination.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{estimate_factors, select_num_factors, FactorDecomposition, FactorOptions};
use crate::glasso::{build_tau_grid, default_vartheta, glasso_tune, GlassoConfig, TuningGrid};
use crate::matrix::{inverse_pd, PrecisionEstimate, SymmetricMatrix};

/// Upper bound applied to the data-driven ϑ, which exceeds one for very
/// small `p`.
pub const MAX_VARTHETA: f64 = 0.9;

/// Relative diagonal level below which the residual covariance is treated as
/// rank deficient.
const DEGENERATE_DIAGONAL: f64 = 1e-10;

/// How many factors to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FactorCountRepr", into = "FactorCountRepr")]
#[derive(Default)]
pub enum FactorCount {
    Fixed(usize),
    /// Chosen by IC1 over `1..=q_max`.
    #[default]
    Auto,
}


impl fmt::Display for FactorCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorCount::Fixed(q) => write!(f, "{q}"),
            FactorCount::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FactorCountRepr {
    Fixed(usize),
    Named(String),
}

impl TryFrom<FactorCountRepr> for FactorCount {
    type Error = String;

    fn try_from(r: FactorCountRepr) -> std::result::Result<Self, String> {
        match r {
            FactorCountRepr::Fixed(q) => Ok(FactorCount::Fixed(q)),
            FactorCountRepr::Named(s) if s.eq_ignore_ascii_case("auto") => Ok(FactorCount::Auto),
            FactorCountRepr::Named(s) => Err(format!("expected an integer or \"auto\", got {s:?}")),
        }
    }
}

impl From<FactorCount> for FactorCountRepr {
    fn from(c: FactorCount) -> Self {
        match c {
            FactorCount::Fixed(q) => FactorCountRepr::Fixed(q),
            FactorCount::Auto => FactorCountRepr::Named("auto".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorGlassoConfig {
    pub factors: FactorCount,
    /// Largest candidate for [`FactorCount::Auto`].
    pub q_max: usize,
    /// Number of τ grid points `M`.
    pub grid_size: usize,
    /// `None` uses `sqrt(ln p / T) + 1/sqrt(p)`.
    pub vartheta: Option<f64>,
    /// Skips BIC tuning when set.
    pub fixed_tau: Option<f64>,
    pub glasso: GlassoConfig,
    pub factor: FactorOptions,
}

impl Default for FactorGlassoConfig {
    fn default() -> Self {
        FactorGlassoConfig {
            factors: FactorCount::Auto,
            q_max: 8,
            grid_size: 10,
            vartheta: None,
            fixed_tau: None,
            glasso: GlassoConfig::default(),
            factor: FactorOptions::default(),
        }
    }
}

impl FactorGlassoConfig {
    pub fn with_factors(q: usize) -> Self {
        FactorGlassoConfig {
            factors: FactorCount::Fixed(q),
            ..Default::default()
        }
    }

    /// Grid for a residual covariance from `t` observations.
    pub fn tau_grid(&self, s_eps: &SymmetricMatrix, t: usize) -> Result<TuningGrid> {
        if let Some(tau) = self.fixed_tau {
            return Ok(TuningGrid::single(tau));
        }
        let vartheta = self
            .vartheta
            .unwrap_or_else(|| default_vartheta(s_eps.dim(), t).min(MAX_VARTHETA));
        build_tau_grid(s_eps, self.grid_size, vartheta)
    }
}

#[derive(Debug, Clone)]
pub struct FactorGlassoResult {
    pub decomposition: FactorDecomposition,
    pub theta_eps_hat: PrecisionEstimate,
    pub theta_hat: PrecisionEstimate,
    pub chosen_tau: f64,
    /// `(τ, BIC)` per grid point; empty when τ was fixed or not tuned.
    pub bic_scores: Vec<(f64, f64)>,
}

/// `Θ = Θ_ε - Θ_ε B [Θ_f + B'Θ_ε B]^{-1} B'Θ_ε`.
pub fn smw_combine(
    theta_eps: &PrecisionEstimate,
    theta_f: &PrecisionEstimate,
    loadings: &DMatrix<f64>,
) -> Result<PrecisionEstimate> {
    let (p, q) = loadings.shape();
    if theta_eps.dim() != p || theta_f.dim() != q {
        return Err(Error::Dimension(format!(
            "SMW needs Θ_ε {p}x{p}, Θ_f {q}x{q}; got {}x{} and {}x{}",
            theta_eps.dim(),
            theta_eps.dim(),
            theta_f.dim(),
            theta_f.dim()
        )));
    }
    let te = theta_eps.matrix().as_matrix();
    let teb = te * loadings;
    let inner = theta_f.matrix().as_matrix() + loadings.tr_mul(&teb);
    let inner_inv = inner
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| inner.try_inverse())
        .ok_or_else(|| Error::Degenerate("SMW inner q×q system is singular".into()))?;
    let theta = te - &teb * inner_inv * teb.transpose();
    let theta = SymmetricMatrix::symmetrize(theta)?;
    Ok(PrecisionEstimate::new(theta, theta_eps.tau()))
}

fn resolve_q(errors: &DMatrix<f64>, cfg: &FactorGlassoConfig) -> Result<usize> {
    let (t, p) = errors.shape();
    match cfg.factors {
        FactorCount::Fixed(0) => Err(Error::InvalidParameter(
            "factor pipeline requires q >= 1; use plain GLASSO for q = 0".into(),
        )),
        FactorCount::Fixed(q) => Ok(q),
        FactorCount::Auto => {
            let q_max = cfg.q_max.min(t.min(p).saturating_sub(1)).max(1);
            select_num_factors(errors, q_max, &cfg.factor)
        }
    }
}

/// Rejects residual covariances with a (numerically) vanishing diagonal,
/// which arise when the factors explain the errors exactly.
pub(crate) fn check_residual_covariance(s_eps: &SymmetricMatrix, total_scale: f64) -> Result<()> {
    let floor = DEGENERATE_DIAGONAL * total_scale.max(f64::MIN_POSITIVE);
    if let Some((i, v)) = s_eps
        .diagonal()
        .into_iter()
        .enumerate()
        .find(|(_, v)| !(*v > floor))
    {
        return Err(Error::Degenerate(format!(
            "residual covariance is rank deficient: diagonal entry {i} = {v:e}"
        )));
    }
    Ok(())
}

fn decompose(
    errors: &DMatrix<f64>,
    cfg: &FactorGlassoConfig,
) -> Result<(FactorDecomposition, SymmetricMatrix)> {
    let (t, p) = errors.shape();
    if t < 4 || p < 2 {
        return Err(Error::Dimension(format!(
            "factor GLASSO needs T >= 4 and p >= 2, got T = {t}, p = {p}"
        )));
    }
    let q = resolve_q(errors, cfg)?;
    let decomposition = estimate_factors(errors, q, &cfg.factor)?;
    let s_eps = decomposition.residual_covariance()?;
    let scale = decomposition.eigenvalues.iter().sum::<f64>() / p as f64;
    check_residual_covariance(&s_eps, scale)?;
    Ok((decomposition, s_eps))
}

/// Runs factor estimation, BIC-tuned weighted GLASSO on the residual
/// covariance and SMW recombination on a `T × p` error matrix.
pub fn factor_glasso_fit(
    errors: &DMatrix<f64>,
    cfg: &FactorGlassoConfig,
) -> Result<FactorGlassoResult> {
    let (decomposition, s_eps) = decompose(errors, cfg)?;
    let t = errors.nrows();
    let grid = cfg.tau_grid(&s_eps, t)?;
    let tuned = glasso_tune(&s_eps, t, &grid, &cfg.glasso)?;
    let theta_hat = smw_combine(
        &tuned.precision,
        &decomposition.theta_f,
        &decomposition.loadings,
    )?;
    let bic_scores = if cfg.fixed_tau.is_some() {
        Vec::new()
    } else {
        tuned.scores
    };
    Ok(FactorGlassoResult {
        decomposition,
        theta_eps_hat: tuned.precision,
        theta_hat,
        chosen_tau: tuned.chosen_tau,
        bic_scores,
    })
}

/// The factor model without sparsity on Θ_ε (τ = 0), regularized by a
/// ridge `δ = 1e-8 · trace(Σ̂_ε)/p` so it stays invertible when `p ≈ T`.
pub fn not_sparse_fit(
    errors: &DMatrix<f64>,
    cfg: &FactorGlassoConfig,
) -> Result<FactorGlassoResult> {
    let (decomposition, s_eps) = decompose(errors, cfg)?;
    let p = s_eps.dim();
    let delta = 1e-8 * s_eps.trace() / p as f64;
    let ridged =
        SymmetricMatrix::symmetrize(s_eps.as_matrix() + DMatrix::<f64>::identity(p, p) * delta)?;
    let theta_eps_hat = PrecisionEstimate::certified(inverse_pd(&ridged)?, 0.0)?;
    let theta_hat = smw_combine(
        &theta_eps_hat,
        &decomposition.theta_f,
        &decomposition.loadings,
    )?;
    Ok(FactorGlassoResult {
        decomposition,
        theta_eps_hat,
        theta_hat,
        chosen_tau: 0.0,
        bic_scores: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::inverse_pd;

    fn pseudo(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed | 1;
        DMatrix::from_fn(r, c, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    fn spd(p: usize, seed: u64) -> SymmetricMatrix {
        let x = pseudo(2 * p + 3, p, seed);
        SymmetricMatrix::symmetrize(x.tr_mul(&x) + DMatrix::identity(p, p) * 0.1).unwrap()
    }

    #[test]
    fn zero_loadings_return_theta_eps() {
        let te = PrecisionEstimate::new(spd(5, 2), 0.1);
        let tf = PrecisionEstimate::new(spd(2, 3), 0.0);
        let out = smw_combine(&te, &tf, &DMatrix::zeros(5, 2)).unwrap();
        assert_eq!(out.matrix(), te.matrix());
    }

    #[test]
    fn scalar_identity() {
        let te = PrecisionEstimate::new(SymmetricMatrix::from_diagonal(&[2.0]).unwrap(), 0.0);
        let tf = PrecisionEstimate::new(SymmetricMatrix::from_diagonal(&[1.0]).unwrap(), 0.0);
        let out = smw_combine(&te, &tf, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((out.matrix().get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_inverse() {
        let (p, q) = (6, 2);
        let sigma_eps = spd(p, 7);
        let sigma_f = spd(q, 9);
        let b = pseudo(p, q, 11);
        let sigma = b.clone() * sigma_f.as_matrix() * b.transpose() + sigma_eps.as_matrix();
        let direct = inverse_pd(&SymmetricMatrix::symmetrize(sigma).unwrap()).unwrap();
        let te = PrecisionEstimate::new(inverse_pd(&sigma_eps).unwrap(), 0.0);
        let tf = PrecisionEstimate::new(inverse_pd(&sigma_f).unwrap(), 0.0);
        let out = smw_combine(&te, &tf, &b).unwrap();
        let rel =
            (out.matrix().as_matrix() - direct.as_matrix()).norm() / direct.as_matrix().norm();
        assert!(rel < 1e-8, "rel = {rel:e}");
        assert!(out.is_pd_certified());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let te = PrecisionEstimate::new(spd(4, 1), 0.0);
        let tf = PrecisionEstimate::new(spd(2, 1), 0.0);
        assert!(smw_combine(&te, &tf, &DMatrix::zeros(5, 2)).is_err());
    }

    #[test]
    fn exact_factor_errors_are_rejected_as_degenerate() {
        let f = pseudo(50, 2, 5);
        let b = pseudo(8, 2, 6);
        let e = f * b.transpose();
        let err = factor_glasso_fit(&e, &FactorGlassoConfig::with_factors(2)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "{err}");
    }

    #[test]
    fn zero_factors_is_rejected() {
        let e = pseudo(50, 6, 5);
        assert!(matches!(
            factor_glasso_fit(&e, &FactorGlassoConfig::with_factors(0)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn pipeline_output_is_pd_and_consistent() {
        let e = pseudo(80, 10, 12) + pseudo(80, 1, 13) * DMatrix::from_element(1, 10, 1.5);
        let fit = factor_glasso_fit(&e, &FactorGlassoConfig::default()).unwrap();
        assert!(fit.theta_hat.is_pd_certified());
        assert!(fit.theta_eps_hat.is_pd_certified());
        assert_eq!(fit.bic_scores.len(), 10);
        assert!(fit.bic_scores.iter().any(|(t, _)| *t == fit.chosen_tau));
        let again = smw_combine(
            &fit.theta_eps_hat,
            &fit.decomposition.theta_f,
            &fit.decomposition.loadings,
        )
        .unwrap();
        assert_eq!(again.matrix(), fit.theta_hat.matrix());
    }

    #[test]
    fn not_sparse_is_pd() {
        let e = pseudo(40, 6, 21);
        let fit = not_sparse_fit(&e, &FactorGlassoConfig::with_factors(1)).unwrap();
        assert!(fit.theta_hat.is_pd_certified());
        assert_eq!(fit.chosen_tau, 0.0);
    }

    #[test]
    fn factor_count_serde() {
        let auto: FactorCount = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(auto, FactorCount::Auto);
        let two: FactorCount = serde_json::from_str("2").unwrap();
        assert_eq!(two, FactorCount::Fixed(2));
        assert!(serde_json::from_str::<FactorCount>("\"many\"").is_err());
        assert_eq!(
            serde_json::to_string(&FactorCount::Auto).unwrap(),
            "\"auto\""
        );
    }
}
