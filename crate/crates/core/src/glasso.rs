//! Weighted graphical LASSO.
//!
//! Minimizes
//!
//! ```text
//! trace(S Θ) - log det Θ + τ Σ_{i≠j} γ_i γ_j |θ_ij|,    γ_i = sqrt(s_ii)
//! ```
//!
//! over symmetric positive definite Θ by block coordinate ascent on the
//! covariance estimate `W`: every column is a LASSO problem in
//! `β = -θ_12 / θ_22`, solved by cyclical coordinate descent. The diagonal of
//! `W` is unpenalized and therefore stays at `s_ii` throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    log_det_pd, sparsity_stats, PrecisionEstimate, SymmetricMatrix, DEFAULT_ZERO_TOL,
};
use crate::regime::soft_threshold;

/// Coordinate descent passes allowed per column before moving on.
const MAX_INNER_PASSES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlassoConfig {
    pub tau: f64,
    pub max_sweeps: usize,
    /// Absolute change in any β coordinate below which a column is solved.
    pub coord_tol: f64,
    /// Sweep stops when `max |ΔW| <= outer_tol * mean |s_ij|` (off-diagonal).
    pub outer_tol: f64,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        GlassoConfig {
            tau: 0.0,
            max_sweeps: 200,
            coord_tol: 1e-7,
            outer_tol: 1e-4,
        }
    }
}

impl GlassoConfig {
    pub fn with_tau(tau: f64) -> Self {
        GlassoConfig {
            tau,
            ..Default::default()
        }
    }
}

/// Output of [`glasso_solve`].
#[derive(Debug, Clone)]
pub struct GlassoFit {
    pub precision: PrecisionEstimate,
    /// Final covariance iterate `W`.
    pub covariance: SymmetricMatrix,
    pub sweeps: usize,
    pub converged: bool,
    /// `-log det W` after every sweep; block coordinate ascent makes this
    /// nonincreasing (`+∞` while `W` is still singular).
    pub dual_objective: Vec<f64>,
    betas: DMatrix<f64>,
}

/// Penalty scales `γ_i = sqrt(s_ii)`.
pub fn penalty_scales(s: &SymmetricMatrix) -> Vec<f64> {
    s.diagonal().iter().map(|v| v.sqrt()).collect()
}

/// The weighted penalized negative log-likelihood at `theta`.
pub fn penalized_objective(theta: &SymmetricMatrix, s: &SymmetricMatrix, tau: f64) -> Result<f64> {
    let gamma = penalty_scales(s);
    let p = s.dim();
    let mut penalty = 0.0;
    for j in 0..p {
        for i in 0..p {
            if i != j {
                penalty += gamma[i] * gamma[j] * theta.get(i, j).abs();
            }
        }
    }
    Ok(s.trace_product(theta) - log_det_pd(theta)? + tau * penalty)
}

fn validate_input(s: &SymmetricMatrix, cfg: &GlassoConfig) -> Result<()> {
    if let Some((i, v)) = s
        .diagonal()
        .into_iter()
        .enumerate()
        .find(|(_, v)| !(*v > 0.0))
    {
        return Err(Error::NotPositiveDefinite(format!(
            "input diagonal entry {i} is {v}, expected > 0"
        )));
    }
    if !(cfg.tau >= 0.0) || !cfg.tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "tau must be >= 0, got {}",
            cfg.tau
        )));
    }
    if !(cfg.coord_tol > 0.0 && cfg.outer_tol > 0.0) || cfg.max_sweeps == 0 {
        return Err(Error::InvalidParameter(
            "tolerances must be > 0 and max_sweeps >= 1".into(),
        ));
    }
    Ok(())
}

/// Solves the weighted GLASSO for a single τ.
pub fn glasso_solve(s: &SymmetricMatrix, cfg: &GlassoConfig) -> Result<GlassoFit> {
    glasso_solve_from(s, cfg, None)
}

/// As [`glasso_solve`], optionally warm-started from a previous fit (used
/// along a τ path).
pub fn glasso_solve_from(
    s: &SymmetricMatrix,
    cfg: &GlassoConfig,
    warm: Option<&GlassoFit>,
) -> Result<GlassoFit> {
    validate_input(s, cfg)?;
    let p = s.dim();
    let sm = s.as_matrix();
    let gamma = penalty_scales(s);

    let (mut w, mut betas) = match warm {
        Some(prev) if prev.covariance.dim() == p => {
            let mut w = prev.covariance.as_matrix().clone();
            for i in 0..p {
                w[(i, i)] = sm[(i, i)];
            }
            (w, prev.betas.clone())
        }
        _ => (sm.clone(), DMatrix::zeros(p, p)),
    };

    let mut off_sum = 0.0;
    for j in 0..p {
        for i in 0..p {
            if i != j {
                off_sum += sm[(i, j)].abs();
            }
        }
    }
    let mean_off = if p > 1 {
        off_sum / (p * (p - 1)) as f64
    } else {
        0.0
    };
    let threshold = cfg.outer_tol * mean_off;

    let mut dual_objective = Vec::new();
    let mut converged = p == 1;
    let mut sweeps = 0;
    let mut w12 = DVector::zeros(p);

    while !converged && sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0_f64;
        for j in 0..p {
            // w12 = W11 β for the warm-started β of column j.
            w12.fill(0.0);
            for k in 0..p {
                let b = betas[(k, j)];
                if k != j && b != 0.0 {
                    for i in 0..p {
                        w12[i] += w[(i, k)] * b;
                    }
                }
            }
            for _ in 0..MAX_INNER_PASSES {
                let mut max_delta = 0.0_f64;
                for k in 0..p {
                    if k == j {
                        continue;
                    }
                    let old = betas[(k, j)];
                    let wkk = w[(k, k)];
                    let r = sm[(k, j)] - (w12[k] - wkk * old);
                    let new = soft_threshold(r, cfg.tau * gamma[k] * gamma[j]) / wkk;
                    if new != old {
                        let delta = new - old;
                        for i in 0..p {
                            w12[i] += delta * w[(i, k)];
                        }
                        betas[(k, j)] = new;
                        max_delta = max_delta.max(delta.abs());
                    }
                }
                if max_delta < cfg.coord_tol {
                    break;
                }
            }
            for k in 0..p {
                if k != j {
                    max_change = max_change.max((w[(k, j)] - w12[k]).abs());
                    w[(k, j)] = w12[k];
                    w[(j, k)] = w12[k];
                }
            }
        }
        dual_objective.push(match w.clone().cholesky() {
            Some(c) => -2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None => f64::INFINITY,
        });
        converged = max_change <= threshold;
    }

    let precision = recover_precision(&w, &betas, cfg.tau)?.with_converged(converged);
    if !converged {
        log::warn!(
            "glasso did not converge in {} sweeps (tau = {})",
            cfg.max_sweeps,
            cfg.tau
        );
    }
    Ok(GlassoFit {
        precision,
        covariance: SymmetricMatrix::symmetrize(w)?,
        sweeps,
        converged,
        dual_objective,
        betas,
    })
}

/// Partitioned-inverse recovery: `1/θ_22 = w_22 - β'w_12`, `θ_12 = -θ_22 β`.
fn recover_precision(
    w: &DMatrix<f64>,
    betas: &DMatrix<f64>,
    tau: f64,
) -> Result<PrecisionEstimate> {
    let p = w.nrows();
    let mut theta = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut quad = 0.0;
        for k in 0..p {
            if k != j {
                quad += betas[(k, j)] * w[(k, j)];
            }
        }
        let denom = w[(j, j)] - quad;
        if !(denom > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "partitioned inverse of column {j} has non-positive Schur complement {denom:e}"
            )));
        }
        let theta_jj = 1.0 / denom;
        theta[(j, j)] = theta_jj;
        for k in 0..p {
            if k != j {
                theta[(k, j)] = -theta_jj * betas[(k, j)];
            }
        }
    }
    Ok(PrecisionEstimate::new(
        SymmetricMatrix::symmetrize(theta)?,
        tau,
    ))
}

/// Ascending log-spaced grid of shrinkage intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub taus: Vec<f64>,
    pub vartheta: f64,
}

impl TuningGrid {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// A grid holding a single, explicitly chosen τ.
    pub fn single(tau: f64) -> Self {
        TuningGrid {
            taus: vec![tau],
            vartheta: 1.0,
        }
    }
}

/// `ϑ = sqrt(ln p / T) + 1/sqrt(p)`.
pub fn default_vartheta(p: usize, t: usize) -> f64 {
    ((p as f64).ln() / t as f64).sqrt() + 1.0 / (p as f64).sqrt()
}

/// Grid from `τ_1 = ϑ τ_M` to `τ_M = max_{i≠j} |s_ij|`, log-spaced.
pub fn build_tau_grid(s: &SymmetricMatrix, m: usize, vartheta: f64) -> Result<TuningGrid> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "grid needs M >= 2 points, got {m}"
        )));
    }
    if !(vartheta > 0.0 && vartheta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "vartheta must lie in (0, 1), got {vartheta}"
        )));
    }
    let tau_max = s.max_abs_off_diagonal();
    if !(tau_max > 0.0) {
        return Err(Error::Degenerate(
            "all off-diagonal entries are zero; the tuning grid collapses".into(),
        ));
    }
    let tau_min = vartheta * tau_max;
    let log_ratio = (tau_max / tau_min).ln();
    let mut taus: Vec<f64> = (0..m)
        .map(|i| (tau_min.ln() + i as f64 / (m - 1) as f64 * log_ratio).exp())
        .collect();
    taus[0] = tau_min;
    taus[m - 1] = tau_max;
    Ok(TuningGrid { taus, vartheta })
}

/// `T [trace(Θ Σ) - log det Θ] + ln(T) · #{θ_ij ≠ 0, i ≤ j}`.
pub fn bic_score(theta: &PrecisionEstimate, s: &SymmetricMatrix, t: usize) -> Result<f64> {
    if theta.dim() != s.dim() {
        return Err(Error::Dimension(
            "precision and covariance differ in size".into(),
        ));
    }
    let m = theta.matrix();
    let likelihood = m.trace_product(s) - log_det_pd(m)?;
    let p = m.dim();
    let off_edges = sparsity_stats(m, DEFAULT_ZERO_TOL).edge_count / 2;
    let diag_nonzero = (0..p)
        .filter(|&i| m.get(i, i).abs() > DEFAULT_ZERO_TOL)
        .count();
    let tf = t as f64;
    Ok(tf * likelihood + tf.ln() * (off_edges + diag_nonzero) as f64)
}

/// Result of BIC grid search.
#[derive(Debug, Clone)]
pub struct TunedGlasso {
    pub precision: PrecisionEstimate,
    pub chosen_tau: f64,
    /// `(τ, BIC)` for every grid point, in ascending τ order.
    pub scores: Vec<(f64, f64)>,
}

/// Fits every τ in the grid (largest first, warm-started) and keeps the BIC
/// minimizer; ties go to the larger τ.
pub fn glasso_tune(
    s: &SymmetricMatrix,
    t: usize,
    grid: &TuningGrid,
    base: &GlassoConfig,
) -> Result<TunedGlasso> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty tuning grid".into()));
    }
    let mut best: Option<(f64, f64, PrecisionEstimate)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    let mut warm: Option<GlassoFit> = None;
    for &tau in grid.taus.iter().rev() {
        let cfg = GlassoConfig { tau, ..*base };
        let fit = glasso_solve_from(s, &cfg, warm.as_ref())?;
        let score = if fit.precision.is_pd_certified() {
            bic_score(&fit.precision, s, t)?
        } else {
            f64::INFINITY
        };
        scores.push((tau, score));
        let better = match &best {
            None => true,
            Some((_, b, _)) => score < *b,
        };
        if better {
            best = Some((tau, score, fit.precision.clone()));
        }
        warm = Some(fit);
    }
    scores.reverse();
    let (chosen_tau, score, precision) = best.expect("grid is non-empty");
    if !score.is_finite() {
        return Err(Error::NotPositiveDefinite(
            "no grid point produced a positive definite estimate".into(),
        ));
    }
    Ok(TunedGlasso {
        precision,
        chosen_tau,
        scores,
    })
}
