//! Dense symmetric matrices, precision estimates and graph diagnostics.
//!
//! Everything downstream (GLASSO, PCA, ADMM, SMW recombination) works on
//! [`SymmetricMatrix`], a thin validated wrapper over `nalgebra::DMatrix`.
//! Symmetry is enforced exactly: constructors symmetrize `(A + A') / 2`
//! after checking that the input is symmetric up to rounding.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Off-diagonal entries at or below this magnitude are reported as absent
/// edges. Soft-thresholding produces exact zeros, so this only absorbs
/// rounding.
pub const DEFAULT_ZERO_TOL: f64 = 1e-10;

/// Relative asymmetry tolerated by [`SymmetricMatrix::new`].
const SYMMETRY_TOL: f64 = 1e-9;

/// A square, finite, exactly symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Validates `m` and removes rounding-level asymmetry.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        check_finite(&m)?;
        let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        let p = m.nrows();
        for j in 0..p {
            for i in (j + 1)..p {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                if gap > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric {
                        row: i,
                        col: j,
                        gap,
                    });
                }
            }
        }
        Ok(Self::symmetrize_unchecked(m))
    }

    /// Returns `(m + m') / 2` for any finite square `m`.
    pub fn symmetrize(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        check_finite(&m)?;
        Ok(Self::symmetrize_unchecked(m))
    }

    fn symmetrize_unchecked(mut m: DMatrix<f64>) -> Self {
        let p = m.nrows();
        for j in 0..p {
            for i in (j + 1)..p {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        SymmetricMatrix(m)
    }

    pub fn identity(p: usize) -> Self {
        SymmetricMatrix(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Builds a matrix from row-major nested slices.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension("rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Largest absolute off-diagonal entry (0 for 1×1 matrices).
    pub fn max_abs_off_diagonal(&self) -> f64 {
        let p = self.dim();
        let mut best = 0.0_f64;
        for j in 0..p {
            for i in (j + 1)..p {
                best = best.max(self.0[(i, j)].abs());
            }
        }
        best
    }

    /// `trace(self * other)` without forming the product.
    pub fn trace_product(&self, other: &SymmetricMatrix) -> f64 {
        self.0.component_mul(&other.0).sum()
    }

    pub fn scaled(&self, c: f64) -> SymmetricMatrix {
        SymmetricMatrix(&self.0 * c)
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// A symmetric precision matrix together with the shrinkage intensity that
/// produced it.
#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    matrix: SymmetricMatrix,
    tau: f64,
    is_pd_certified: bool,
    converged: bool,
}

impl PrecisionEstimate {
    /// Wraps `matrix`, certifying positive definiteness by Cholesky.
    pub fn new(matrix: SymmetricMatrix, tau: f64) -> Self {
        let is_pd_certified = is_positive_definite(&matrix);
        PrecisionEstimate {
            matrix,
            tau,
            is_pd_certified,
            converged: true,
        }
    }

    /// Like [`PrecisionEstimate::new`] but rejects matrices that are not PD.
    pub fn certified(matrix: SymmetricMatrix, tau: f64) -> Result<Self> {
        let est = Self::new(matrix, tau);
        if !est.is_pd_certified {
            return Err(Error::NotPositiveDefinite(
                "Cholesky factorization failed".into(),
            ));
        }
        Ok(est)
    }

    pub fn with_converged(mut self, converged: bool) -> Self {
        self.converged = converged;
        self
    }

    pub fn matrix(&self) -> &SymmetricMatrix {
        &self.matrix
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_pd_certified(&self) -> bool {
        self.is_pd_certified
    }

    /// False when the producing solver hit its iteration cap.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn into_matrix(self) -> SymmetricMatrix {
        self.matrix
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors
/// stored column-wise.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl Eigen {
    /// Rebuilds `Q diag(f(λ)) Q'`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let p = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..p {
            let s = f(self.values[k]);
            scaled.column_mut(k).scale_mut(s);
        }
        &scaled * self.vectors.transpose()
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending. Each
/// eigenvector's largest-magnitude component is made positive so results are
/// reproducible across runs.
pub fn symmetric_eigen(m: &SymmetricMatrix) -> Result<Eigen> {
    // SymmetricMatrix is finite by construction, but keep the check local to
    // the contract.
    check_finite(m.as_matrix())?;
    let eig = m.as_matrix().clone().symmetric_eigen();
    let p = m.dim();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let values = DVector::from_iterator(p, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..p {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.column_mut(dst).copy_from(&(col * sign));
    }
    Ok(Eigen { values, vectors })
}

/// True iff the Cholesky factorization succeeds (smallest eigenvalue > 0).
pub fn is_positive_definite(m: &SymmetricMatrix) -> bool {
    m.as_matrix().clone().cholesky().is_some()
}

/// `log det` of a positive definite matrix.
pub fn log_det_pd(m: &SymmetricMatrix) -> Result<f64> {
    let chol = m
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("log det is undefined".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a positive definite matrix via Cholesky.
pub fn inverse_pd(m: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let chol = m
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("cannot invert".into()))?;
    SymmetricMatrix::symmetrize(chol.inverse())
}

/// Inverse of a small symmetric matrix, rejecting condition numbers above
/// `max_condition`.
pub fn inverse_conditioned(m: &SymmetricMatrix, max_condition: f64) -> Result<SymmetricMatrix> {
    let eig = symmetric_eigen(m)?;
    let largest = eig.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let smallest = eig.values.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let condition = if smallest > 0.0 {
        largest / smallest
    } else {
        f64::INFINITY
    };
    if !(condition <= max_condition) {
        return Err(Error::IllConditioned {
            condition,
            limit: max_condition,
        });
    }
    SymmetricMatrix::symmetrize(eig.reconstruct_with(|l| 1.0 / l))
}

/// `(1/T) X'X` for a `T × p` data matrix (no demeaning).
pub fn sample_covariance(x: &DMatrix<f64>) -> Result<SymmetricMatrix> {
    if x.nrows() == 0 {
        return Err(Error::Dimension("sample covariance of zero rows".into()));
    }
    let t = x.nrows() as f64;
    SymmetricMatrix::symmetrize(x.tr_mul(x) / t)
}

/// Largest singular value.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |a, v| a.max(*v))
}

/// `max_j Σ_i |m_ij|`, the ℓ1/ℓ1 induced norm.
pub fn l1_operator_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

/// Vertex degrees and edge set of the graph implied by a matrix's
/// off-diagonal support.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityStats {
    /// `d_j`: number of nonzero off-diagonal entries in column `j`.
    pub degree_per_vertex: Vec<usize>,
    /// `d = max_j d_j`.
    pub max_degree: usize,
    /// `s = Σ_j d_j`; every undirected edge is counted at both endpoints.
    pub edge_count: usize,
    /// Ordered pairs `(i, j)`, `i ≠ j`, with a nonzero entry.
    pub pattern: BTreeSet<(usize, usize)>,
}

pub fn sparsity_stats(m: &SymmetricMatrix, zero_tol: f64) -> SparsityStats {
    let p = m.dim();
    let mut degree_per_vertex = vec![0; p];
    let mut pattern = BTreeSet::new();
    for j in 0..p {
        for i in 0..p {
            if i != j && m.get(i, j).abs() > zero_tol {
                degree_per_vertex[j] += 1;
                pattern.insert((i, j));
            }
        }
    }
    SparsityStats {
        max_degree: degree_per_vertex.iter().copied().max().unwrap_or(0),
        edge_count: degree_per_vertex.iter().sum(),
        degree_per_vertex,
        pattern,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_symmetric(p: usize, seed: u64) -> SymmetricMatrix {
        // Small LCG so the test does not depend on the crate's RNG plumbing.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let a = DMatrix::from_fn(p, p, |_, _| next());
        SymmetricMatrix::symmetrize(&a + a.transpose()).unwrap()
    }

    fn relative_reconstruction_error(m: &SymmetricMatrix) -> (f64, f64) {
        let e = symmetric_eigen(m).unwrap();
        let rebuilt = e.reconstruct_with(|l| l);
        let rel = (rebuilt - m.as_matrix()).norm() / m.as_matrix().norm().max(1e-300);
        let p = m.dim();
        let orth = (e.vectors.transpose() * &e.vectors - DMatrix::identity(p, p)).norm();
        (rel, orth)
    }

    #[test]
    fn eigen_of_identity() {
        let e = symmetric_eigen(&SymmetricMatrix::identity(3)).unwrap();
        assert!(e.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let qtq = e.vectors.transpose() * &e.vectors;
        assert!((qtq - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn eigen_of_diagonal_is_axis_aligned_and_descending() {
        let m = SymmetricMatrix::from_diagonal(&[1.0, 3.0]).unwrap();
        let e = symmetric_eigen(&m).unwrap();
        assert_eq!(e.values.as_slice(), &[3.0, 1.0]);
        assert!((e.vectors[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((e.vectors[(0, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eigen_reconstructs_random_matrices() {
        for (p, seed) in [(5, 1), (5, 2), (40, 3), (300, 4)] {
            let m = random_symmetric(p, seed);
            let (rel, orth) = relative_reconstruction_error(&m);
            assert!(rel < 1e-10, "p={p} rel={rel:e}");
            assert!(orth < 1e-10, "p={p} orth={orth:e}");
        }
    }

    #[test]
    fn eigen_sign_convention_makes_dominant_component_positive() {
        let m = random_symmetric(6, 11);
        let e = symmetric_eigen(&m).unwrap();
        for col in e.vectors.column_iter() {
            let dominant = col
                .iter()
                .copied()
                .fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(dominant > 0.0);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        m[(1, 0)] = f64::NAN;
        assert!(matches!(
            SymmetricMatrix::new(m),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(matches!(
            SymmetricMatrix::new(m),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn positive_definite_checks() {
        assert!(is_positive_definite(&SymmetricMatrix::identity(4)));
        assert!(!is_positive_definite(
            &SymmetricMatrix::from_diagonal(&[1.0, -1.0]).unwrap()
        ));
        let near = SymmetricMatrix::from_rows(&[&[1.0, 0.99], &[0.99, 1.0]]).unwrap();
        assert!(is_positive_definite(&near));
    }

    #[test]
    fn sparsity_of_identity_and_complete_graph() {
        let s = sparsity_stats(&SymmetricMatrix::identity(4), 0.0);
        assert_eq!(s.degree_per_vertex, vec![0; 4]);
        assert_eq!((s.max_degree, s.edge_count), (0, 0));

        let dense = SymmetricMatrix::new(DMatrix::from_element(4, 4, 0.3)).unwrap();
        let s = sparsity_stats(&dense, 0.0);
        assert_eq!((s.max_degree, s.edge_count), (3, 12));
        assert_eq!(s.pattern.len(), 12);
    }

    #[test]
    fn sparsity_of_tridiagonal() {
        let m = SymmetricMatrix::new(DMatrix::from_fn(4, 4, |i, j| {
            if i == j {
                2.0
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let s = sparsity_stats(&m, 0.0);
        assert_eq!(s.degree_per_vertex, vec![1, 2, 2, 1]);
        assert_eq!((s.max_degree, s.edge_count), (2, 6));
    }

    #[test]
    fn zero_tol_hides_rounding() {
        let m = SymmetricMatrix::from_rows(&[&[1.0, 1e-12], &[1e-12, 1.0]]).unwrap();
        assert_eq!(sparsity_stats(&m, DEFAULT_ZERO_TOL).edge_count, 0);
        assert_eq!(sparsity_stats(&m, 0.0).edge_count, 2);
    }

    #[test]
    fn log_det_and_inverse_agree_with_diagonal_case() {
        let m = SymmetricMatrix::from_diagonal(&[2.0, 4.0]).unwrap();
        assert!((log_det_pd(&m).unwrap() - 8.0_f64.ln()).abs() < 1e-14);
        let inv = inverse_pd(&m).unwrap();
        assert!((inv.get(0, 0) - 0.5).abs() < 1e-15 && (inv.get(1, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ill_conditioned_inverse_is_rejected() {
        let m = SymmetricMatrix::from_diagonal(&[1.0, 1e-14]).unwrap();
        assert!(matches!(
            inverse_conditioned(&m, 1e12),
            Err(Error::IllConditioned { .. })
        ));
    }

    proptest! {
        #[test]
        fn sparsity_matches_brute_force(
            p in 2usize..8,
            bits in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let m = DMatrix::from_fn(p, p, |i, j| {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                if i == j { 1.0 } else if bits[a * 8 + b] { 0.5 } else { 0.0 }
            });
            let m = SymmetricMatrix::new(m).unwrap();
            let stats = sparsity_stats(&m, 0.0);
            let mut brute = 0;
            for i in 0..p {
                for j in (i + 1)..p {
                    let (a, b) = (i, j);
                    if bits[a * 8 + b] { brute += 2; }
                }
            }
            prop_assert_eq!(stats.edge_count, brute);
            prop_assert_eq!(stats.max_degree, *stats.degree_per_vertex.iter().max().unwrap());
            prop_assert!(stats.edge_count <= p * (p - 1));
        }

        #[test]
        fn eigen_reconstruction_property(p in 1usize..30, seed in any::<u64>()) {
            let m = random_symmetric(p, seed);
            let (rel, orth) = relative_reconstruction_error(&m);
            prop_assert!(rel < 1e-10);
            prop_assert!(orth < 1e-10);
        }
    }
}
