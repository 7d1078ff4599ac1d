//! Regime-dependent idiosyncratic precision estimation: N known regimes,
//! each with its own sparse precision, tied together by a smoothing penalty
//! on consecutive differences and solved by consensus ADMM.

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glasso::penalty_scales;
use crate::matrix::{
    log_det_pd, sample_covariance, symmetric_eigen, PrecisionEstimate, SymmetricMatrix,
};

/// Contiguous regimes covering periods `0..T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSegmentation {
    /// Exclusive end of each regime, `t_1 < … < t_N = T`.
    ends: Vec<usize>,
}

impl RegimeSegmentation {
    /// Builds from regime end points; `ends` must be strictly increasing and
    /// every regime must hold at least two periods.
    pub fn from_ends(ends: Vec<usize>) -> Result<Self> {
        if ends.is_empty() {
            return Err(Error::InvalidParameter(
                "segmentation needs at least one regime".into(),
            ));
        }
        let mut start = 0;
        for &end in &ends {
            if end < start + 2 {
                return Err(Error::InvalidParameter(format!(
                    "regime [{start}, {end}) is shorter than two periods"
                )));
            }
            start = end;
        }
        Ok(RegimeSegmentation { ends })
    }

    /// Builds from the first period of each new regime, for a sample of `t`
    /// periods.
    pub fn from_breaks(t: usize, breaks: &[usize]) -> Result<Self> {
        let mut ends: Vec<usize> = breaks.to_vec();
        ends.push(t);
        Self::from_ends(ends)
    }

    pub fn single(t: usize) -> Result<Self> {
        Self::from_ends(vec![t])
    }

    pub fn n_regimes(&self) -> usize {
        self.ends.len()
    }

    pub fn total_len(&self) -> usize {
        *self.ends.last().expect("nonempty by construction")
    }

    pub fn ends(&self) -> &[usize] {
        &self.ends
    }

    /// First period of regimes `2..=N`.
    pub fn breaks(&self) -> &[usize] {
        &self.ends[..self.ends.len() - 1]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.n_regimes()).map(|i| self.range(i).len()).collect()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        let start = if i == 0 { 0 } else { self.ends[i - 1] };
        start..self.ends[i]
    }

    /// Regime containing period `t`; periods past the end belong to the last
    /// regime.
    pub fn regime_of(&self, t: usize) -> usize {
        self.ends
            .iter()
            .position(|&e| t < e)
            .unwrap_or(self.ends.len() - 1)
    }

    /// Restriction to periods `0..t`, dropping regimes that would hold fewer
    /// than two periods.
    pub fn truncate(&self, t: usize) -> Result<Self> {
        let mut ends: Vec<usize> = self
            .breaks()
            .iter()
            .copied()
            .filter(|&b| b + 2 <= t)
            .collect();
        while let Some(&last) = ends.last() {
            let prev = if ends.len() >= 2 {
                ends[ends.len() - 2]
            } else {
                0
            };
            if last < prev + 2 {
                ends.pop();
            } else {
                break;
            }
        }
        ends.push(t);
        Self::from_ends(ends)
    }
}

/// Per-regime covariances `(1/n_i) Σ ε̂ ε̂'` of the rows of `residuals`.
pub fn regime_covariances(
    residuals: &DMatrix<f64>,
    seg: &RegimeSegmentation,
) -> Result<Vec<SymmetricMatrix>> {
    if seg.total_len() != residuals.nrows() {
        return Err(Error::Dimension(format!(
            "segmentation covers {} periods but residuals have {} rows",
            seg.total_len(),
            residuals.nrows()
        )));
    }
    (0..seg.n_regimes())
        .map(|i| {
            let r = seg.range(i);
            sample_covariance(&residuals.rows(r.start, r.len()).into_owned())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Lasso,
    GroupLasso,
    Ridge,
    MaxNorm,
}

/// `β ψ(Θ_i - Θ_{i-1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingPenalty {
    pub kind: PenaltyKind,
    pub beta: f64,
}

impl SmoothingPenalty {
    pub fn ridge(beta: f64) -> Self {
        SmoothingPenalty {
            kind: PenaltyKind::Ridge,
            beta,
        }
    }

    pub fn lasso(beta: f64) -> Self {
        SmoothingPenalty {
            kind: PenaltyKind::Lasso,
            beta,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        match self.kind {
            PenaltyKind::Lasso | PenaltyKind::Ridge => Ok(()),
            PenaltyKind::GroupLasso | PenaltyKind::MaxNorm => Err(Error::Unsupported(format!(
                "{:?} smoothing penalty is not implemented; use ridge or lasso",
                self.kind
            ))),
        }
    }

    /// `β ψ(d)`: ridge is the squared Frobenius norm, lasso the elementwise
    /// absolute sum.
    pub fn value(&self, d: &DMatrix<f64>) -> Result<f64> {
        self.validate()?;
        Ok(self.beta
            * match self.kind {
                PenaltyKind::Ridge => d.norm_squared(),
                _ => d.iter().map(|v| v.abs()).sum(),
            })
    }
}

/// `sign(x) max(|x| - κ, 0)`.
pub fn soft_threshold(x: f64, kappa: f64) -> f64 {
    if x > kappa {
        x - kappa
    } else if x < -kappa {
        x + kappa
    } else {
        0.0
    }
}

/// Minimizes `(ρ/2)(‖A - Z2‖² + ‖B - Z1‖²) + β ψ(Z2 - Z1)`, returning
/// `(Z2, Z1)`.
pub fn prox_pair(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    penalty: &SmoothingPenalty,
    rho: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    penalty.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "prox_pair operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rho must be > 0, got {rho}"
        )));
    }
    let beta = penalty.beta;
    let mut z2 = a.clone();
    let mut z1 = b.clone();
    match penalty.kind {
        PenaltyKind::Ridge => {
            let shift = (a - b) * (2.0 * beta / (rho + 4.0 * beta));
            z2 -= &shift;
            z1 += &shift;
        }
        PenaltyKind::Lasso => {
            let step = beta / rho;
            z2.zip_apply(b, |x, y| {
                let d = *x - y;
                *x = if d.abs() <= 2.0 * step {
                    0.5 * (*x + y)
                } else {
                    *x - step * d.signum()
                };
            });
            z1.zip_apply(a, |y, x| {
                let d = x - *y;
                *y = if d.abs() <= 2.0 * step {
                    0.5 * (x + *y)
                } else {
                    *y + step * d.signum()
                };
            });
        }
        _ => unreachable!("validated above"),
    }
    Ok((z2, z1))
}

/// `η = n_i / (c_i ρ)` for a regime with `copies` consensus copies.
pub fn admm_eta(n: usize, copies: usize, rho: f64) -> f64 {
    n as f64 / (copies as f64 * rho)
}

/// Minimizes `trace(ΣΘ) - log det Θ + (1/2η)‖Θ - A‖²_F` in closed form:
/// with `(1/η)A - Σ = QΛQ'`, `Θ = (η/2) Q (Λ + sqrt(Λ² + 4/η)) Q'`.
pub fn theta_step(a: &DMatrix<f64>, sigma: &SymmetricMatrix, eta: f64) -> Result<SymmetricMatrix> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "eta must be > 0, got {eta}"
        )));
    }
    let target = SymmetricMatrix::symmetrize(a / eta - sigma.as_matrix())?;
    let eig = symmetric_eigen(&target)?;
    let c = 4.0 / eta;
    let theta = eig.reconstruct_with(|l| 0.5 * eta * (l + (l * l + c).sqrt()));
    SymmetricMatrix::symmetrize(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub rho: f64,
    /// Doubles/halves ρ when the primal/dual residual ratio exceeds 10.
    pub adaptive_rho: bool,
    /// Stopping tolerance per dimension: `eps = eps_per_dim · p`.
    pub eps_per_dim: f64,
    pub max_iter: usize,
    /// Over-relaxation `γ ∈ (0, 2)`; `1` is plain ADMM.
    pub relaxation: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            adaptive_rho: false,
            eps_per_dim: 1e-6,
            max_iter: 5000,
            relaxation: 1.0,
        }
    }
}

/// Primal, consensus and scaled dual variables. `z1[k]`/`z2[k]` are the
/// copies of `Θ_k`/`Θ_{k+1}` used by the smoothing term between regimes `k`
/// and `k+1`.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub thetas: Vec<DMatrix<f64>>,
    pub z0: Vec<DMatrix<f64>>,
    pub z1: Vec<DMatrix<f64>>,
    pub z2: Vec<DMatrix<f64>>,
    pub u0: Vec<DMatrix<f64>>,
    pub u1: Vec<DMatrix<f64>>,
    pub u2: Vec<DMatrix<f64>>,
    pub rho: f64,
    pub iteration: usize,
}

impl AdmmState {
    fn initial(covs: &[SymmetricMatrix], rho: f64) -> Self {
        let n = covs.len();
        let thetas: Vec<DMatrix<f64>> = covs
            .iter()
            .map(|s| DMatrix::from_diagonal(&s.as_matrix().diagonal().map(|v| 1.0 / v)))
            .collect();
        let p = covs[0].dim();
        let zeros = |k: usize| vec![DMatrix::<f64>::zeros(p, p); k];
        AdmmState {
            z0: thetas.clone(),
            z1: thetas[..n - 1].to_vec(),
            z2: thetas[1..].to_vec(),
            u0: zeros(n),
            u1: zeros(n - 1),
            u2: zeros(n - 1),
            thetas,
            rho,
            iteration: 0,
        }
    }

    fn compatible(&self, n: usize, p: usize) -> bool {
        self.thetas.len() == n && self.thetas.iter().all(|t| t.nrows() == p)
    }

    fn rescale_duals(&mut self, factor: f64) {
        for u in self
            .u0
            .iter_mut()
            .chain(self.u1.iter_mut())
            .chain(self.u2.iter_mut())
        {
            *u *= factor;
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdmmResult {
    /// `Θ̂_ε,i` per regime: the sparse consensus copy `Z_{i,0}` when it is PD,
    /// otherwise the (always PD) Θ-step iterate.
    pub precisions: Vec<PrecisionEstimate>,
    pub state: AdmmState,
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Value of the regime-dependent objective
/// `Σ n_i [tr(Σ_i Θ_i) - log det Θ_i] + α Σ_i ‖Θ_i‖_od,1 + β Σ ψ(Θ_i - Θ_{i-1})`.
pub fn rd_objective(
    thetas: &[SymmetricMatrix],
    covs: &[SymmetricMatrix],
    lengths: &[usize],
    alpha: f64,
    penalty: &SmoothingPenalty,
) -> Result<f64> {
    let mut total = 0.0;
    for ((theta, s), &n) in thetas.iter().zip(covs).zip(lengths) {
        let gamma = penalty_scales(s);
        let p = s.dim();
        let mut od = 0.0;
        for j in 0..p {
            for i in 0..p {
                if i != j {
                    od += gamma[i] * gamma[j] * theta.get(i, j).abs();
                }
            }
        }
        total += n as f64 * (s.trace_product(theta) - log_det_pd(theta)?) + alpha * od;
    }
    for w in thetas.windows(2) {
        total += penalty.value(&(w[1].as_matrix() - w[0].as_matrix()))?;
    }
    Ok(total)
}

fn validate(
    covs: &[SymmetricMatrix],
    lengths: &[usize],
    alpha: f64,
    cfg: &AdmmConfig,
) -> Result<usize> {
    if covs.is_empty() || covs.len() != lengths.len() {
        return Err(Error::Dimension(format!(
            "need one covariance per regime: {} covariances, {} lengths",
            covs.len(),
            lengths.len()
        )));
    }
    let p = covs[0].dim();
    if covs.iter().any(|s| s.dim() != p) {
        return Err(Error::Dimension(
            "regime covariances differ in dimension".into(),
        ));
    }
    for s in covs {
        if s.diagonal().iter().any(|v| !(*v > 0.0)) {
            return Err(Error::NotPositiveDefinite(
                "regime covariance has a nonpositive diagonal entry".into(),
            ));
        }
    }
    if lengths.contains(&0) {
        return Err(Error::InvalidParameter(
            "regime lengths must be positive".into(),
        ));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    if !(cfg.rho > 0.0) || !(cfg.eps_per_dim > 0.0) || cfg.max_iter == 0 {
        return Err(Error::InvalidParameter(
            "ADMM needs rho > 0, eps_per_dim > 0 and max_iter >= 1".into(),
        ));
    }
    if !(cfg.relaxation > 0.0 && cfg.relaxation < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "relaxation must lie in (0, 2), got {}",
            cfg.relaxation
        )));
    }
    Ok(p)
}

/// Solves the regime-dependent problem from scratch.
pub fn rd_admm_solve(
    covs: &[SymmetricMatrix],
    lengths: &[usize],
    alpha: f64,
    penalty: &SmoothingPenalty,
    cfg: &AdmmConfig,
) -> Result<AdmmResult> {
    rd_admm_solve_from(covs, lengths, alpha, penalty, cfg, None)
}

/// As [`rd_admm_solve`], warm-started from a previous state when its shape
/// matches.
pub fn rd_admm_solve_from(
    covs: &[SymmetricMatrix],
    lengths: &[usize],
    alpha: f64,
    penalty: &SmoothingPenalty,
    cfg: &AdmmConfig,
    warm: Option<&AdmmState>,
) -> Result<AdmmResult> {
    let p = validate(covs, lengths, alpha, cfg)?;
    penalty.validate()?;
    let n = covs.len();
    let mut st = match warm {
        Some(w) if w.compatible(n, p) => {
            let mut s = w.clone();
            // An adapted ρ carries over; otherwise restart from the configured one.
            if !cfg.adaptive_rho {
                s.rescale_duals(w.rho / cfg.rho);
                s.rho = cfg.rho;
            }
            s.iteration = 0;
            s
        }
        _ => AdmmState::initial(covs, cfg.rho),
    };
    let gammas: Vec<Vec<f64>> = covs.iter().map(penalty_scales).collect();
    let eps = cfg.eps_per_dim * p as f64;

    let mut converged = false;
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    while st.iteration < cfg.max_iter {
        st.iteration += 1;
        let rho = st.rho;

        let new_thetas: Vec<DMatrix<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut a = &st.z0[i] - &st.u0[i];
                let mut copies = 1;
                if i + 1 < n {
                    a += &st.z1[i] - &st.u1[i];
                    copies += 1;
                }
                if i > 0 {
                    a += &st.z2[i - 1] - &st.u2[i - 1];
                    copies += 1;
                }
                a /= copies as f64;
                theta_step(&a, &covs[i], admm_eta(lengths[i], copies, rho))
                    .map(SymmetricMatrix::into_inner)
            })
            .collect::<Result<_>>()?;
        st.thetas = new_thetas;

        // Relaxed copies γΘ + (1-γ)Z feed the Z and U updates.
        let g_relax = cfg.relaxation;
        let relax = |theta: &DMatrix<f64>, z: &DMatrix<f64>| -> DMatrix<f64> {
            if g_relax == 1.0 {
                theta.clone()
            } else {
                theta * g_relax + z * (1.0 - g_relax)
            }
        };
        let h0: Vec<DMatrix<f64>> = (0..n).map(|i| relax(&st.thetas[i], &st.z0[i])).collect();
        let h1: Vec<DMatrix<f64>> = (0..n.saturating_sub(1))
            .map(|k| relax(&st.thetas[k], &st.z1[k]))
            .collect();
        let h2: Vec<DMatrix<f64>> = (0..n.saturating_sub(1))
            .map(|k| relax(&st.thetas[k + 1], &st.z2[k]))
            .collect();

        let mut dual_sq: f64 = 0.0;
        for i in 0..n {
            let mut z = &h0[i] + &st.u0[i];
            let g = &gammas[i];
            for c in 0..p {
                for r in 0..p {
                    if r != c {
                        z[(r, c)] = soft_threshold(z[(r, c)], alpha * g[r] * g[c] / rho);
                    }
                }
            }
            dual_sq = dual_sq.max((&z - &st.z0[i]).norm());
            st.z0[i] = z;
        }
        for k in 0..n.saturating_sub(1) {
            let a = &h2[k] + &st.u2[k];
            let b = &h1[k] + &st.u1[k];
            let (z2, z1) = prox_pair(&a, &b, penalty, rho)?;
            dual_sq = dual_sq
                .max((&z2 - &st.z2[k]).norm())
                .max((&z1 - &st.z1[k]).norm());
            st.z2[k] = z2;
            st.z1[k] = z1;
        }

        let mut primal_max: f64 = 0.0;
        for i in 0..n {
            primal_max = primal_max.max((&st.thetas[i] - &st.z0[i]).norm());
            st.u0[i] += &h0[i] - &st.z0[i];
        }
        for k in 0..n.saturating_sub(1) {
            let r1 = (&st.thetas[k] - &st.z1[k]).norm();
            let r2 = (&st.thetas[k + 1] - &st.z2[k]).norm();
            primal_max = primal_max.max(r1).max(r2);
            st.u1[k] += &h1[k] - &st.z1[k];
            st.u2[k] += &h2[k] - &st.z2[k];
        }
        primal = primal_max;
        dual = rho * dual_sq;
        if primal < eps && dual < eps {
            converged = true;
            break;
        }
        if cfg.adaptive_rho {
            if primal > 10.0 * dual {
                st.rho *= 2.0;
                st.rescale_duals(0.5);
            } else if dual > 10.0 * primal {
                st.rho /= 2.0;
                st.rescale_duals(2.0);
            }
        }
    }
    if !converged {
        log::warn!(
            "ADMM stopped after {} iterations (primal {primal:.3e}, dual {dual:.3e}, eps {eps:.3e})",
            st.iteration
        );
    }

    let precisions = (0..n)
        .map(|i| {
            let z = SymmetricMatrix::symmetrize(st.z0[i].clone())?;
            let est = PrecisionEstimate::new(z, alpha);
            let est = if est.is_pd_certified() {
                est
            } else {
                PrecisionEstimate::certified(
                    SymmetricMatrix::symmetrize(st.thetas[i].clone())?,
                    alpha,
                )?
            };
            Ok(est.with_converged(converged))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdmmResult {
        precisions,
        iterations: st.iteration,
        state: st,
        converged,
        primal_residual: primal,
        dual_residual: dual,
    })
}
