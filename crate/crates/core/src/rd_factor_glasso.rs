//! RD-Factor GLASSO: one full-sample factor model, regime-dependent
//! idiosyncratic precisions from ADMM, per-regime SMW recombination and
//! weights, with `(α, β)` chosen over a grid.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::combination::{weights_from_precision, CombinationWeights};
use crate::error::{Error, Result};
use crate::factor::{estimate_factors, select_num_factors, FactorDecomposition, FactorOptions};
use crate::factor_glasso::{check_residual_covariance, smw_combine, FactorCount};
use crate::matrix::{operator_norm, symmetric_eigen, PrecisionEstimate, SymmetricMatrix};
use crate::regime::{
    rd_admm_solve_from, regime_covariances, AdmmConfig, AdmmState, PenaltyKind, RegimeSegmentation,
    SmoothingPenalty,
};

/// Relative eigenvalue floor below which a regime covariance counts as
/// singular.
const SINGULAR_EIGENVALUE: f64 = 1e-10;

/// Default grid shared by α and β.
pub const DEFAULT_RD_GRID: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 10.0, 30.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RdCriterion {
    /// Fit on the first part of the sample, score the MSFE of the combined
    /// forecast on the rest.
    ValidationMsfe,
    /// Mean operator-norm distance to known per-regime precisions (simulation
    /// only).
    OperatorNormLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdConfig {
    pub factors: FactorCount,
    pub q_max: usize,
    pub factor: FactorOptions,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub penalty: PenaltyKind,
    pub admm: AdmmConfig,
    pub criterion: RdCriterion,
    /// Share of the sample used for fitting under [`RdCriterion::ValidationMsfe`].
    pub train_fraction: f64,
    /// Refit on the full sample with the selected `(α, β)`.
    pub refit: bool,
    /// Skips tuning when set.
    pub fixed_pair: Option<(f64, f64)>,
}

impl Default for RdConfig {
    fn default() -> Self {
        RdConfig {
            factors: FactorCount::Auto,
            q_max: 8,
            factor: FactorOptions::default(),
            alpha_grid: DEFAULT_RD_GRID.to_vec(),
            beta_grid: DEFAULT_RD_GRID.to_vec(),
            penalty: PenaltyKind::Ridge,
            admm: AdmmConfig::default(),
            criterion: RdCriterion::ValidationMsfe,
            train_fraction: 2.0 / 3.0,
            refit: true,
            fixed_pair: None,
        }
    }
}

impl RdConfig {
    pub fn with_factors(q: usize) -> Self {
        RdConfig {
            factors: FactorCount::Fixed(q),
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.beta_grid.is_empty() {
            return Err(Error::InvalidParameter(
                "alpha and beta grids must be nonempty".into(),
            ));
        }
        if self
            .alpha_grid
            .iter()
            .chain(&self.beta_grid)
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "grid values must be finite and >= 0".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RdFit {
    pub decomposition: FactorDecomposition,
    pub segmentation: RegimeSegmentation,
    pub theta_eps: Vec<PrecisionEstimate>,
    pub thetas: Vec<PrecisionEstimate>,
    pub weights: Vec<CombinationWeights>,
    pub alpha: f64,
    pub beta: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl RdFit {
    /// Weights of the last regime, the ones to use for forecasting past the
    /// sample.
    pub fn latest_weights(&self) -> &CombinationWeights {
        self.weights.last().expect("at least one regime")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdCandidate {
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct RdTuned {
    pub fit: RdFit,
    /// One entry per grid pair, in grid order (α outer, β inner).
    pub scores: Vec<RdCandidate>,
}

fn factor_step(errors: &DMatrix<f64>, cfg: &RdConfig) -> Result<FactorDecomposition> {
    let (t, p) = errors.shape();
    let q = match cfg.factors {
        FactorCount::Fixed(0) => {
            return Err(Error::InvalidParameter(
                "RD-Factor GLASSO requires q >= 1".into(),
            ))
        }
        FactorCount::Fixed(q) => q,
        FactorCount::Auto => {
            let q_max = cfg.q_max.min(t.min(p).saturating_sub(1)).max(1);
            select_num_factors(errors, q_max, &cfg.factor)?
        }
    };
    estimate_factors(errors, q, &cfg.factor)
}

/// Reusable pieces of one sample: factors and per-regime residual
/// covariances.
struct Prepared {
    decomposition: FactorDecomposition,
    covs: Vec<SymmetricMatrix>,
    lengths: Vec<usize>,
    segmentation: RegimeSegmentation,
    /// Some regime covariance is singular, so `α = 0` has no minimizer.
    singular: bool,
}

fn prepare(errors: &DMatrix<f64>, seg: &RegimeSegmentation, cfg: &RdConfig) -> Result<Prepared> {
    let (t, p) = errors.shape();
    if seg.total_len() != t {
        return Err(Error::Dimension(format!(
            "segmentation covers {} periods, errors have {t}",
            seg.total_len()
        )));
    }
    if p < 2 || t < 4 {
        return Err(Error::Dimension(format!(
            "need T >= 4 and p >= 2, got T = {t}, p = {p}"
        )));
    }
    let decomposition = factor_step(errors, cfg)?;
    let covs = regime_covariances(&decomposition.residuals, seg)?;
    let scale = decomposition.eigenvalues.iter().sum::<f64>() / p as f64;
    let mut singular = false;
    for s in &covs {
        check_residual_covariance(s, scale)?;
        let lmin = symmetric_eigen(s)?.values.min();
        singular |= lmin <= SINGULAR_EIGENVALUE * s.trace() / p as f64;
    }
    Ok(Prepared {
        decomposition,
        covs,
        lengths: seg.lengths(),
        segmentation: seg.clone(),
        singular,
    })
}

fn solve(
    prep: &Prepared,
    alpha: f64,
    beta: f64,
    cfg: &RdConfig,
    warm: Option<&AdmmState>,
) -> Result<(RdFit, AdmmState)> {
    let penalty = SmoothingPenalty {
        kind: cfg.penalty,
        beta,
    };
    let out = rd_admm_solve_from(&prep.covs, &prep.lengths, alpha, &penalty, &cfg.admm, warm)?;
    let d = &prep.decomposition;
    let thetas = out
        .precisions
        .iter()
        .map(|te| smw_combine(te, &d.theta_f, &d.loadings).map(|t| t.with_converged(out.converged)))
        .collect::<Result<Vec<_>>>()?;
    let weights = thetas
        .iter()
        .enumerate()
        .map(|(i, th)| weights_from_precision(th, "rd_factor_glasso").map(|w| w.with_regime(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        RdFit {
            decomposition: d.clone(),
            segmentation: prep.segmentation.clone(),
            theta_eps: out.precisions,
            thetas,
            weights,
            alpha,
            beta,
            converged: out.converged,
            iterations: out.iterations,
        },
        out.state,
    ))
}

/// Fits at a single `(α, β)`.
pub fn rd_factor_glasso_fit(
    errors: &DMatrix<f64>,
    seg: &RegimeSegmentation,
    alpha: f64,
    beta: f64,
    cfg: &RdConfig,
) -> Result<RdFit> {
    let prep = prepare(errors, seg, cfg)?;
    Ok(solve(&prep, alpha, beta, cfg, None)?.0)
}

/// Runs `f` over the grid with warm starts and keeps the smallest score;
/// ties keep the earlier pair. Pairs with `α = 0` score `+∞` without being
/// solved when a regime covariance is singular: PCA residuals have rank at
/// most `p - q`, and without an ℓ1 term the likelihood is unbounded along
/// the null space.
fn grid_search(
    prep: &Prepared,
    cfg: &RdConfig,
    mut score: impl FnMut(&RdFit) -> Result<f64>,
) -> Result<(RdFit, Vec<RdCandidate>)> {
    let mut warm: Option<AdmmState> = None;
    let mut best: Option<(f64, RdFit)> = None;
    let mut scores = Vec::with_capacity(cfg.alpha_grid.len() * cfg.beta_grid.len());
    for &alpha in &cfg.alpha_grid {
        for &beta in &cfg.beta_grid {
            if alpha == 0.0 && prep.singular {
                scores.push(RdCandidate {
                    alpha,
                    beta,
                    score: f64::INFINITY,
                });
                continue;
            }
            let (fit, state) = solve(prep, alpha, beta, cfg, warm.as_ref())?;
            warm = Some(state);
            let s = score(&fit)?;
            scores.push(RdCandidate {
                alpha,
                beta,
                score: s,
            });
            if best.as_ref().is_none_or(|(b, _)| s < *b) {
                best = Some((s, fit));
            }
        }
    }
    let (_, fit) =
        best.ok_or_else(|| Error::InvalidParameter("no feasible (α, β) pair in the grid".into()))?;
    Ok((fit, scores))
}

/// Chooses `(α, β)` by the configured criterion, or fits
/// [`RdConfig::fixed_pair`] with a NaN score. `truth` holds the true
/// per-regime precision of the forecast errors and is required for
/// [`RdCriterion::OperatorNormLoss`].
pub fn rd_factor_glasso_tune(
    errors: &DMatrix<f64>,
    seg: &RegimeSegmentation,
    cfg: &RdConfig,
    truth: Option<&[SymmetricMatrix]>,
) -> Result<RdTuned> {
    cfg.validate()?;
    if let Some((alpha, beta)) = cfg.fixed_pair {
        let fit = rd_factor_glasso_fit(errors, seg, alpha, beta, cfg)?;
        let scores = vec![RdCandidate {
            alpha,
            beta,
            score: f64::NAN,
        }];
        return Ok(RdTuned { fit, scores });
    }
    match cfg.criterion {
        RdCriterion::OperatorNormLoss => {
            let truth = truth.ok_or_else(|| {
                Error::InvalidParameter("operator-norm tuning needs the true precisions".into())
            })?;
            if truth.len() != seg.n_regimes() {
                return Err(Error::Dimension(format!(
                    "{} true precisions for {} regimes",
                    truth.len(),
                    seg.n_regimes()
                )));
            }
            let prep = prepare(errors, seg, cfg)?;
            let (fit, scores) = grid_search(&prep, cfg, |fit| {
                let total: f64 = fit
                    .thetas
                    .iter()
                    .zip(truth)
                    .map(|(est, th)| operator_norm(&(est.matrix().as_matrix() - th.as_matrix())))
                    .sum();
                Ok(total / truth.len() as f64)
            })?;
            Ok(RdTuned { fit, scores })
        }
        RdCriterion::ValidationMsfe => {
            let t = errors.nrows();
            let n_train = ((t as f64) * cfg.train_fraction).floor() as usize;
            if n_train < 4 || n_train >= t {
                return Err(Error::Dimension(format!(
                    "validation split leaves {n_train} training periods out of {t}"
                )));
            }
            let train_seg = seg.truncate(n_train)?;
            let train = errors.rows(0, n_train).into_owned();
            let prep = prepare(&train, &train_seg, cfg)?;
            let last = train_seg.n_regimes() - 1;
            let (fit, scores) = grid_search(&prep, cfg, |fit| {
                let mut sse = 0.0;
                for row in n_train..t {
                    let w = &fit.weights[seg.regime_of(row).min(last)].weights;
                    let e: f64 = errors.row(row).iter().zip(w).map(|(e, w)| e * w).sum();
                    sse += e * e;
                }
                Ok(sse / (t - n_train) as f64)
            })?;
            let fit = if cfg.refit {
                rd_factor_glasso_fit(errors, seg, fit.alpha, fit.beta, cfg)?
            } else {
                fit
            };
            Ok(RdTuned { fit, scores })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_glasso::{factor_glasso_fit, FactorGlassoConfig};

    fn pseudo(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed | 1;
        DMatrix::from_fn(r, c, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    fn errors(t: usize, p: usize, seed: u64) -> DMatrix<f64> {
        pseudo(t, p, seed) + pseudo(t, 1, seed + 1) * DMatrix::from_element(1, p, 1.2)
    }

    #[test]
    fn default_grid_has_36_pairs() {
        let e = errors(60, 6, 3);
        let seg = RegimeSegmentation::from_breaks(60, &[30]).unwrap();
        let mut cfg = RdConfig::with_factors(1);
        cfg.admm.max_iter = 300;
        let tuned = rd_factor_glasso_tune(&e, &seg, &cfg, None).unwrap();
        assert_eq!(tuned.scores.len(), 36);
        assert_eq!(tuned.fit.weights.len(), 2);
        for w in &tuned.fit.weights {
            assert!((w.sum() - 1.0).abs() < 1e-12);
        }
        assert!(tuned.fit.thetas.iter().all(|t| t.is_pd_certified()));
    }

    #[test]
    fn single_regime_matches_factor_glasso() {
        let (t, p) = (80, 8);
        let e = errors(t, p, 9);
        let tau = 0.05;
        let seg = RegimeSegmentation::single(t).unwrap();
        let mut cfg = RdConfig::with_factors(1);
        cfg.admm.eps_per_dim = 1e-10;
        cfg.admm.max_iter = 50_000;
        let rd = rd_factor_glasso_fit(&e, &seg, tau * t as f64, 0.0, &cfg).unwrap();
        let mut fg_cfg = FactorGlassoConfig::with_factors(1);
        fg_cfg.fixed_tau = Some(tau);
        fg_cfg.glasso.outer_tol = 1e-10;
        fg_cfg.glasso.coord_tol = 1e-12;
        fg_cfg.glasso.max_sweeps = 1000;
        let fg = factor_glasso_fit(&e, &fg_cfg).unwrap();
        let diff = rd.thetas[0].matrix().as_matrix() - fg.theta_hat.matrix().as_matrix();
        assert!(diff.abs().max() < 1e-4, "{:e}", diff.abs().max());
    }

    #[test]
    fn oracle_criterion_requires_truth() {
        let e = errors(40, 5, 1);
        let seg = RegimeSegmentation::single(40).unwrap();
        let cfg = RdConfig {
            criterion: RdCriterion::OperatorNormLoss,
            ..RdConfig::with_factors(1)
        };
        assert!(rd_factor_glasso_tune(&e, &seg, &cfg, None).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RdConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RdConfig>(&json).unwrap(), cfg);
        let partial: RdConfig =
            serde_json::from_str(r#"{"factors": 2, "penalty": "lasso"}"#).unwrap();
        assert_eq!(partial.factors, FactorCount::Fixed(2));
        assert_eq!(partial.alpha_grid, DEFAULT_RD_GRID.to_vec());
    }
}
