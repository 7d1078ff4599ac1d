//! Forecast errors with a factor structure and a sparse idiosyncratic
//! precision, optionally with a single break in that precision.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{inverse_pd, SymmetricMatrix};
use crate::regime::RegimeSegmentation;

/// `p = floor(T^0.85)`.
pub fn p_rule(t: usize) -> usize {
    (t as f64).powf(0.85).floor() as usize
}

/// `q = round(2 sqrt(ln T))`.
pub fn q_rule(t: usize) -> usize {
    (2.0 * (t as f64).ln().sqrt()).round() as usize
}

/// Default `δ` of the row-ℓ1 rescaling.
pub const DEFAULT_DOMINANCE_MARGIN: f64 = 0.05;

/// `π = 500 / (p T^0.8)`, capped at 1.
pub fn edge_probability_rule(p: usize, t: usize) -> f64 {
    (500.0 / (p as f64 * (t as f64).powf(0.8))).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignPattern {
    /// Every nonzero partial correlation positive (negative precision entries).
    Positive,
    /// Independent fair-coin signs per edge.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsePrecisionSpec {
    pub p: usize,
    pub edge_probability: f64,
    pub min_coef: f64,
    pub max_coef: f64,
    pub signs: SignPattern,
    /// Diagonal-dominance margin `δ`: every row's off-diagonal ℓ1 mass is at
    /// most `1 - δ`.
    pub dominance_margin: f64,
}

impl SparsePrecisionSpec {
    pub fn new(p: usize, edge_probability: f64) -> Self {
        SparsePrecisionSpec {
            p,
            edge_probability,
            min_coef: 0.1,
            max_coef: 0.3,
            signs: SignPattern::Positive,
            dominance_margin: DEFAULT_DOMINANCE_MARGIN,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidParameter("p must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_probability) {
            return Err(Error::InvalidParameter(format!(
                "edge probability must lie in [0, 1], got {}",
                self.edge_probability
            )));
        }
        if !(self.min_coef > 0.0 && self.min_coef <= self.max_coef && self.max_coef < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < min_coef <= max_coef < 1, got [{}, {}]",
                self.min_coef, self.max_coef
            )));
        }
        check_margin(self.dominance_margin)
    }
}

fn check_margin(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "dominance margin must lie in (0, 1), got {delta}"
        )));
    }
    Ok(())
}

/// Random graph with per-edge draws that can be mapped to several
/// coefficient ranges while keeping the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomGraph {
    pub p: usize,
    /// Edges `(i, j)` with `i < j`.
    pub edges: Vec<(usize, usize)>,
    /// Uniform(0, 1) position of each edge's magnitude within its range.
    pub positions: Vec<f64>,
    /// ±1 per edge, the sign of the partial correlation.
    pub signs: Vec<f64>,
}

impl RandomGraph {
    pub fn draw<R: Rng + ?Sized>(
        p: usize,
        edge_probability: f64,
        signs: SignPattern,
        rng: &mut R,
    ) -> Self {
        let mut edges = Vec::new();
        let mut positions = Vec::new();
        let mut sign = Vec::new();
        for i in 0..p {
            for j in (i + 1)..p {
                let hit: f64 = rng.random();
                let pos: f64 = rng.random();
                let coin: bool = rng.random();
                if hit < edge_probability {
                    edges.push((i, j));
                    positions.push(pos);
                    sign.push(match signs {
                        SignPattern::Positive => 1.0,
                        SignPattern::Mixed if coin => 1.0,
                        SignPattern::Mixed => -1.0,
                    });
                }
            }
        }
        RandomGraph {
            p,
            edges,
            positions,
            signs: sign,
        }
    }

    pub fn edge_set(&self) -> BTreeSet<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    /// Unit-diagonal precision whose off-diagonal support is exactly the
    /// edge set. Partial correlations drawn in `[min_coef, max_coef]` are
    /// placed on the edges, then entry `(i, j)` is multiplied by
    /// `min(s_i, s_j)` with `s_i = min(1, (1 - δ) / ℓ1_i)` and `ℓ1_i` the
    /// off-diagonal mass of row `i`. Every row ends up with mass at most
    /// `1 - δ`, so the matrix is strictly diagonally dominant and PD. Rows
    /// with many neighbours get partial correlations below `min_coef`.
    pub fn precision(
        &self,
        min_coef: f64,
        max_coef: f64,
        dominance_margin: f64,
    ) -> Result<SymmetricMatrix> {
        check_margin(dominance_margin)?;
        let p = self.p;
        let mut m = DMatrix::<f64>::identity(p, p);
        for ((&(i, j), &u), &s) in self.edges.iter().zip(&self.positions).zip(&self.signs) {
            // θ_ij = -ρ_ij on a unit diagonal.
            let v = -s * (min_coef + u * (max_coef - min_coef));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        let bound = 1.0 - dominance_margin;
        let scale: Vec<f64> = (0..p)
            .map(|i| {
                let l1: f64 = (0..p).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
                if l1 > bound {
                    bound / l1
                } else {
                    1.0
                }
            })
            .collect();
        for &(i, j) in &self.edges {
            let v = m[(i, j)] * scale[i].min(scale[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        SymmetricMatrix::symmetrize(m)
    }
}

/// A sparse PD precision with the drawn adjacency.
#[derive(Debug, Clone)]
pub struct SparsePrecision {
    pub precision: SymmetricMatrix,
    pub graph: RandomGraph,
}

pub fn generate_sparse_precision<R: Rng + ?Sized>(
    spec: &SparsePrecisionSpec,
    rng: &mut R,
) -> Result<SparsePrecision> {
    spec.validate()?;
    let graph = RandomGraph::draw(spec.p, spec.edge_probability, spec.signs, rng);
    let precision = graph.precision(spec.min_coef, spec.max_coef, spec.dominance_margin)?;
    Ok(SparsePrecision { precision, graph })
}

/// Partial correlations `-θ_ij / sqrt(θ_ii θ_jj)`.
pub fn partial_correlations(theta: &SymmetricMatrix) -> DMatrix<f64> {
    let d: Vec<f64> = theta.diagonal().iter().map(|v| v.sqrt()).collect();
    let p = theta.dim();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            -theta.get(i, j) / (d[i] * d[j])
        }
    })
}

/// Lower Cholesky factor `L` (`M = LL'`) of the Toeplitz matrix
/// `M_ij = ρ^|i-j|`. `L` is the transpose of the upper factor.
pub fn toeplitz_cholesky(p: usize, rho: f64) -> Result<DMatrix<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Toeplitz parameter must satisfy |ρ| < 1, got {rho}"
        )));
    }
    let m = DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Toeplitz matrix".into()))?;
    Ok(chol.l())
}

/// Loadings from the first `q` rows of the upper Cholesky factor `R`
/// (`M = R'R`), returned as a `p × q` matrix, i.e. the first `q` columns of
/// `R'`. For `p = 2, ρ = 0.5` the single column is `(1, 0.5)'`.
pub fn toeplitz_cholesky_loadings(p: usize, q: usize, rho: f64) -> Result<DMatrix<f64>> {
    if q == 0 || q > p {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= q <= p, got q = {q}, p = {p}"
        )));
    }
    Ok(toeplitz_cholesky(p, rho)?.columns(0, q).into_owned())
}

/// Draws `n` rows from `N(0, Θ^{-1})` given the precision `Θ`.
pub fn gaussian_rows_from_precision<R: Rng + ?Sized>(
    theta: &SymmetricMatrix,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = theta.dim();
    let chol = theta.as_matrix().clone().cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite("cannot sample from a non-PD precision".into())
    })?;
    let z = DMatrix::<f64>::from_fn(p, n, |_, _| rng.sample(StandardNormal));
    // Θ = LL' ⇒ x = L'^{-1} z has covariance (LL')^{-1}.
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Degenerate("singular Cholesky factor".into()))?;
    Ok(x.transpose())
}

/// A single break in the idiosyncratic precision at `T/2`: the same graph,
/// with the largest coefficient changing between regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionBreak {
    pub max_coef_pre: f64,
    pub max_coef_post: f64,
}

impl Default for PrecisionBreak {
    fn default() -> Self {
        PrecisionBreak {
            max_coef_pre: 0.4,
            max_coef_post: 0.6,
        }
    }
}

/// `e_t = B f_t + ε_t`, `f_t = φ_f f_{t-1} + ζ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorErrorDgpSpec {
    pub t: usize,
    /// `None` applies `p = floor(T^0.85)`.
    pub p: Option<usize>,
    /// `None` applies `q = round(2 sqrt(ln T))`.
    pub q: Option<usize>,
    pub rho: f64,
    pub phi_f: f64,
    pub sigma_zeta: f64,
    /// `None` applies `π = 500 / (p T^0.8)`.
    pub edge_probability: Option<f64>,
    pub min_coef: f64,
    pub max_coef: f64,
    pub signs: SignPattern,
    pub dominance_margin: f64,
    pub precision_break: Option<PrecisionBreak>,
}

impl Default for FactorErrorDgpSpec {
    fn default() -> Self {
        FactorErrorDgpSpec {
            t: 128,
            p: None,
            q: None,
            rho: 0.2,
            phi_f: 0.2,
            sigma_zeta: 1.0,
            edge_probability: None,
            min_coef: 0.1,
            max_coef: 0.3,
            signs: SignPattern::Positive,
            dominance_margin: DEFAULT_DOMINANCE_MARGIN,
            precision_break: None,
        }
    }
}

impl FactorErrorDgpSpec {
    pub fn for_t(t: usize) -> Self {
        FactorErrorDgpSpec {
            t,
            ..Default::default()
        }
    }

    pub fn with_break(t: usize) -> Self {
        FactorErrorDgpSpec {
            t,
            precision_break: Some(PrecisionBreak::default()),
            ..Default::default()
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (
            self.p.unwrap_or_else(|| p_rule(self.t)),
            self.q.unwrap_or_else(|| q_rule(self.t)),
        )
    }

    pub fn break_point(&self) -> Option<usize> {
        self.precision_break.map(|_| self.t / 2)
    }

    pub fn segmentation(&self) -> Result<RegimeSegmentation> {
        match self.break_point() {
            Some(b) => RegimeSegmentation::from_breaks(self.t, &[b]),
            None => RegimeSegmentation::single(self.t),
        }
    }

    fn validate(&self) -> Result<()> {
        let (p, q) = self.dims();
        if self.t < 4 || p < 2 {
            return Err(Error::InvalidParameter(format!(
                "need T >= 4 and p >= 2, got T = {}, p = {p}",
                self.t
            )));
        }
        if q > p {
            return Err(Error::InvalidParameter(format!("q = {q} exceeds p = {p}")));
        }
        if !(self.phi_f.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "|φ_f| must be < 1, got {}",
                self.phi_f
            )));
        }
        if !(self.sigma_zeta >= 0.0) {
            return Err(Error::InvalidParameter("σ_ζ must be >= 0".into()));
        }
        Ok(())
    }
}

/// Simulated errors plus the ground truth of every regime.
#[derive(Debug, Clone)]
pub struct FactorErrorSample {
    /// `T × p`.
    pub errors: DMatrix<f64>,
    /// `T × q`.
    pub factors: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub segmentation: RegimeSegmentation,
    pub graph: RandomGraph,
    pub theta_eps: Vec<SymmetricMatrix>,
    /// `B Σ_f B' + Σ_ε,i` per regime.
    pub sigma: Vec<SymmetricMatrix>,
    pub theta: Vec<SymmetricMatrix>,
}

pub fn simulate_factor_errors<R: Rng + ?Sized>(
    spec: &FactorErrorDgpSpec,
    rng: &mut R,
) -> Result<FactorErrorSample> {
    spec.validate()?;
    let (p, _) = spec.dims();
    let t = spec.t;
    let pi = spec
        .edge_probability
        .unwrap_or_else(|| edge_probability_rule(p, t));
    let graph = RandomGraph::draw(p, pi, spec.signs, rng);
    let maxes: Vec<f64> = match spec.precision_break {
        Some(b) => vec![b.max_coef_pre, b.max_coef_post],
        None => vec![spec.max_coef],
    };
    let theta_eps = maxes
        .iter()
        .map(|&mx| graph.precision(spec.min_coef, mx, spec.dominance_margin))
        .collect::<Result<Vec<_>>>()?;
    simulate_factor_errors_with(spec, graph, theta_eps, rng)
}

/// As [`simulate_factor_errors`] with given idiosyncratic precisions, one per
/// regime of `spec`.
pub fn simulate_factor_errors_with<R: Rng + ?Sized>(
    spec: &FactorErrorDgpSpec,
    graph: RandomGraph,
    theta_eps: Vec<SymmetricMatrix>,
    rng: &mut R,
) -> Result<FactorErrorSample> {
    spec.validate()?;
    let (p, q) = spec.dims();
    let t = spec.t;
    let segmentation = spec.segmentation()?;
    if theta_eps.len() != segmentation.n_regimes() || theta_eps.iter().any(|th| th.dim() != p) {
        return Err(Error::Dimension(format!(
            "need {} idiosyncratic precisions of size {p}",
            segmentation.n_regimes()
        )));
    }

    let loadings = toeplitz_cholesky_loadings(p, q, spec.rho)?;
    let var_f = spec.sigma_zeta * spec.sigma_zeta / (1.0 - spec.phi_f * spec.phi_f);
    let mut factors = DMatrix::<f64>::zeros(t, q);
    for k in 0..q {
        let z: f64 = rng.sample(StandardNormal);
        factors[(0, k)] = var_f.sqrt() * z;
    }
    for s in 1..t {
        for k in 0..q {
            let z: f64 = rng.sample(StandardNormal);
            factors[(s, k)] = spec.phi_f * factors[(s - 1, k)] + spec.sigma_zeta * z;
        }
    }

    let mut errors = &factors * loadings.transpose();
    for (i, th) in theta_eps.iter().enumerate() {
        let r = segmentation.range(i);
        let eps = gaussian_rows_from_precision(th, r.len(), rng)?;
        let mut block = errors.rows_mut(r.start, r.len());
        block += eps;
    }

    let common = &loadings * loadings.transpose() * var_f;
    let mut sigma = Vec::new();
    let mut theta = Vec::new();
    for th in &theta_eps {
        let s = SymmetricMatrix::symmetrize(&common + inverse_pd(th)?.into_inner())?;
        theta.push(inverse_pd(&s)?);
        sigma.push(s);
    }
    Ok(FactorErrorSample {
        errors,
        factors,
        loadings,
        segmentation,
        graph,
        theta_eps,
        sigma,
        theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{sample_covariance, sparsity_stats};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dimension_rules() {
        assert_eq!((p_rule(128), q_rule(128)), (61, 4));
        assert_eq!((p_rule(256), q_rule(256)), (111, 5));
        assert_eq!((p_rule(512), q_rule(512)), (200, 5));
    }

    #[test]
    fn zero_probability_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sp = generate_sparse_precision(&SparsePrecisionSpec::new(10, 0.0), &mut rng).unwrap();
        assert_eq!(sp.precision, SymmetricMatrix::identity(10));
    }

    #[test]
    fn pattern_matches_adjacency_and_is_pd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (p, pi) in [(20, 0.1), (59, edge_probability_rule(59, 128)), (40, 0.5)] {
            for signs in [SignPattern::Positive, SignPattern::Mixed] {
                let spec = SparsePrecisionSpec {
                    signs,
                    ..SparsePrecisionSpec::new(p, pi)
                };
                let sp = generate_sparse_precision(&spec, &mut rng).unwrap();
                let stats = sparsity_stats(&sp.precision, 0.0);
                let upper: BTreeSet<_> = stats
                    .pattern
                    .iter()
                    .copied()
                    .filter(|(i, j)| i < j)
                    .collect();
                assert_eq!(upper, sp.graph.edge_set());
                assert!(crate::matrix::is_positive_definite(&sp.precision));
                assert!(sp
                    .precision
                    .diagonal()
                    .iter()
                    .all(|d| (d - 1.0).abs() < 1e-12));
                let pc = partial_correlations(&sp.precision);
                for (k, &(i, j)) in sp.graph.edges.iter().enumerate() {
                    assert!(pc[(i, j)].abs() <= 0.3 + 1e-12);
                    assert_eq!(pc[(i, j)].signum(), sp.graph.signs[k]);
                }
                for i in 0..p {
                    let l1: f64 = (0..p)
                        .filter(|&j| j != i)
                        .map(|j| sp.precision.get(i, j).abs())
                        .sum();
                    assert!(l1 <= 0.95 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn light_graphs_keep_coefficients_in_range() {
        // A matching (disjoint edges) is never rescaled.
        let graph = RandomGraph {
            p: 6,
            edges: vec![(0, 1), (2, 3), (4, 5)],
            positions: vec![0.0, 0.5, 1.0],
            signs: vec![1.0, -1.0, 1.0],
        };
        let th = graph.precision(0.1, 0.3, 0.05).unwrap();
        assert!((th.get(0, 1) + 0.1).abs() < 1e-12);
        assert!((th.get(2, 3) - 0.2).abs() < 1e-12);
        assert!((th.get(4, 5) + 0.3).abs() < 1e-12);
        let pc = partial_correlations(&th);
        assert!((pc[(2, 3)] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn star_is_rescaled_by_its_hub() {
        // Hub 0 with five leaves at 0.3: mass 1.5 shrinks to 0.95 on every spoke.
        let graph = RandomGraph {
            p: 6,
            edges: (1..6).map(|j| (0, j)).collect(),
            positions: vec![1.0; 5],
            signs: vec![1.0; 5],
        };
        let th = graph.precision(0.1, 0.3, 0.05).unwrap();
        for j in 1..6 {
            assert!((th.get(0, j) + 0.3 * 0.95 / 1.5).abs() < 1e-12);
        }
        assert!(crate::matrix::is_positive_definite(&th));
        assert!(graph.precision(0.1, 0.3, 0.0).is_err());
    }

    #[test]
    fn loadings_examples() {
        let b = toeplitz_cholesky_loadings(2, 1, 0.5).unwrap();
        assert!((b[(0, 0)] - 1.0).abs() < 1e-15 && (b[(1, 0)] - 0.5).abs() < 1e-15);
        let b = toeplitz_cholesky_loadings(5, 3, 0.0).unwrap();
        assert_eq!(b, DMatrix::<f64>::identity(5, 3));
        let b = toeplitz_cholesky_loadings(30, 4, 0.2).unwrap();
        assert_eq!(b.rank(1e-10), 4);
        assert!(toeplitz_cholesky_loadings(3, 1, 1.0).is_err());
    }

    #[test]
    fn reproducible_from_seed() {
        let spec = FactorErrorDgpSpec {
            p: Some(12),
            q: Some(2),
            ..FactorErrorDgpSpec::for_t(40)
        };
        let a = simulate_factor_errors(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = simulate_factor_errors(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.errors, b.errors);
        let c = simulate_factor_errors(&spec, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a.errors, c.errors);
    }

    #[test]
    fn no_factor_noise_leaves_idiosyncratic_errors() {
        let spec = FactorErrorDgpSpec {
            p: Some(8),
            q: Some(2),
            sigma_zeta: 0.0,
            ..FactorErrorDgpSpec::for_t(30)
        };
        let s = simulate_factor_errors(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.factors.iter().all(|v| *v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Replay the draws: graph, q initial factors, (T-1)q innovations, then ε.
        let _ = RandomGraph::draw(
            8,
            spec.edge_probability
                .unwrap_or(edge_probability_rule(8, 30)),
            spec.signs,
            &mut rng,
        );
        for _ in 0..(30 * 2) {
            let _: f64 = rng.sample(StandardNormal);
        }
        let eps = gaussian_rows_from_precision(&s.theta_eps[0], 30, &mut rng).unwrap();
        assert_eq!(s.errors, eps);
    }

    #[test]
    fn long_run_covariance_matches_truth() {
        let spec = FactorErrorDgpSpec {
            p: Some(10),
            q: Some(2),
            edge_probability: Some(0.3),
            ..FactorErrorDgpSpec::for_t(100_000)
        };
        let s = simulate_factor_errors(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let cov = sample_covariance(&s.errors).unwrap();
        let rel = (cov.as_matrix() - s.sigma[0].as_matrix()).norm() / s.sigma[0].as_matrix().norm();
        assert!(rel < 0.02, "relative error {rel}");
    }

    #[test]
    fn break_changes_precision() {
        let spec = FactorErrorDgpSpec {
            p: Some(15),
            q: Some(2),
            edge_probability: Some(0.3),
            ..FactorErrorDgpSpec::with_break(4000)
        };
        let s = simulate_factor_errors(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(s.theta_eps.len(), 2);
        assert_eq!(
            sparsity_stats(&s.theta_eps[0], 0.0).pattern,
            sparsity_stats(&s.theta_eps[1], 0.0).pattern
        );
        let half = |k: usize| {
            let c = sample_covariance(&s.errors.rows(k * 2000, 2000).into_owned()).unwrap();
            inverse_pd(&c).unwrap().into_inner()
        };
        let gap = crate::matrix::operator_norm(&(half(1) - half(0)));
        let truth_gap =
            crate::matrix::operator_norm(&(s.theta[1].as_matrix() - s.theta[0].as_matrix()));
        assert!(truth_gap > 0.03);
        assert!(
            gap > 0.5 * truth_gap,
            "sample gap {gap}, true gap {truth_gap}"
        );
    }
}
