//! Complex-matrix foundations: operators, density matrices, S/R block
//! decompositions, the Hilbert–Schmidt norm, and positivity repair.
//!
//! All matrices are dense `nalgebra` matrices over `Complex64`. Operators on
//! the ambient space are wrapped in [`QOperator`]; off-diagonal blocks that are
//! not square stay plain [`CMatrix`] values.

use nalgebra::linalg::{SymmetricEigen, SVD};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Roundoff floor used by [`repair_state`] when deciding whether a matrix is
/// already a density matrix. Anything inside it is left untouched so that
/// repair is idempotent bit for bit.
const REPAIR_FLOOR: f64 = 1e-13;

/// Numerical tolerances for density-matrix validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub herm: f64,
    pub psd: f64,
    pub trace: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            herm: 1e-9,
            psd: 1e-9,
            trace: 1e-9,
        }
    }
}

/// A dense square complex matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct QOperator(CMatrix);

impl QOperator {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidArgument("operator dimension must be positive".into()));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(m))
    }

    /// Wraps a matrix the caller already knows to be square and finite.
    pub(crate) fn from_matrix_unchecked(m: CMatrix) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        Self(m)
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = CMatrix::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::NotSquare {
                    rows: n,
                    cols: row.len(),
                });
            }
            for (j, z) in row.iter().enumerate() {
                m[(i, j)] = *z;
            }
        }
        Self::new(m)
    }

    pub fn from_real_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<C64>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| C64::new(x, 0.0)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(CMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim, dim))
    }

    pub fn diag_real(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = CMatrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = C64::new(v, 0.0);
        }
        Self(m)
    }

    pub fn diag(values: &[C64]) -> Self {
        let n = values.len();
        let mut m = CMatrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        Self(m)
    }

    /// `|i⟩⟨j|` on a `dim`-dimensional space.
    pub fn ket_bra(dim: usize, i: usize, j: usize) -> Self {
        let mut m = CMatrix::zeros(dim, dim);
        m[(i, j)] = ONE;
        Self(m)
    }

    pub fn pauli_x() -> Self {
        Self(CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]))
    }

    pub fn pauli_y() -> Self {
        Self(CMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO]))
    }

    pub fn pauli_z() -> Self {
        Self(CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn scale(&self, a: f64) -> Self {
        Self(&self.0 * C64::new(a, 0.0))
    }

    pub fn scale_c(&self, a: C64) -> Self {
        Self(&self.0 * a)
    }

    pub fn add(&self, other: &QOperator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self(&self.0 + &other.0))
    }

    pub fn sub(&self, other: &QOperator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self(&self.0 - &other.0))
    }

    pub fn mul(&self, other: &QOperator) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self(&self.0 * &other.0))
    }

    /// `‖A − A†‖`.
    pub fn hermiticity_residual(&self) -> f64 {
        (&self.0 - self.0.adjoint()).norm()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|z| *z == ZERO)
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

/// Hilbert–Schmidt norm `Tr(AA*)^{1/2}`.
pub fn hs_norm(a: &QOperator) -> f64 {
    a.0.norm()
}

/// `(A + A†)/2`, built so that the result is Hermitian bit for bit.
pub fn hermitian_part(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let mut h = CMatrix::zeros(n, n);
    let half = 0.5;
    for j in 0..n {
        h[(j, j)] = C64::new(a[(j, j)].re, 0.0);
        for i in (j + 1)..n {
            let z = (a[(i, j)] + a[(j, i)].conj()) * half;
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
        }
    }
    h
}

/// Strict positive definiteness of a Hermitian matrix by Cholesky
/// factorization (only the lower triangle is read).
pub fn is_positive_definite(h: &CMatrix) -> bool {
    let n = h.nrows();
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = h[(j, j)].re;
        for k in 0..j {
            pivot -= l[(j, k)].norm_sqr();
        }
        if !(pivot > 0.0) {
            return false;
        }
        let d = pivot.sqrt();
        l[(j, j)] = C64::new(d, 0.0);
        for i in (j + 1)..n {
            let mut z = h[(i, j)];
            for k in 0..j {
                z -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = z / d;
        }
    }
    true
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eigen(h: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMatrix::zeros(h.nrows(), h.ncols());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(h: &CMatrix) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(h.clone()).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// A Hermitian, positive-semidefinite, unit-trace operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(QOperator);

impl DensityMatrix {
    pub fn new(op: QOperator, tol: &Tolerances) -> Result<Self> {
        let herm = op.hermiticity_residual();
        if herm > tol.herm {
            return Err(Error::InvalidState(format!("hermiticity residual {herm:.3e}")));
        }
        let tr = op.trace();
        if (tr - ONE).norm() > tol.trace {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        let min = hermitian_eigenvalues(&hermitian_part(op.matrix()))[0];
        if min < -tol.psd {
            return Err(Error::InvalidState(format!("minimum eigenvalue {min:.3e}")));
        }
        Ok(Self(op))
    }

    pub(crate) fn from_matrix_unchecked(m: CMatrix) -> Self {
        Self(QOperator::from_matrix_unchecked(m))
    }

    /// `|ψ⟩⟨ψ|` for a normalized copy of `psi`.
    pub fn pure(psi: &[C64]) -> Result<Self> {
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument("state vector must be nonzero".into()));
        }
        let v = nalgebra::DVector::from_iterator(psi.len(), psi.iter().map(|z| z / norm));
        Ok(Self::from_matrix_unchecked(&v * v.adjoint()))
    }

    /// The basis projector `|i⟩⟨i|`.
    pub fn basis(dim: usize, i: usize) -> Self {
        Self(QOperator::ket_bra(dim, i, i))
    }

    pub fn diagonal(probabilities: &[f64]) -> Result<Self> {
        Self::new(QOperator::diag_real(probabilities), &Tolerances::default())
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self(QOperator::identity(dim).scale(1.0 / dim as f64))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn op(&self) -> &QOperator {
        &self.0
    }

    pub fn matrix(&self) -> &CMatrix {
        self.0.matrix()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        hermitian_eigenvalues(self.matrix())[0]
    }

    /// Strict positivity via a Cholesky attempt.
    pub fn is_positive_definite(&self) -> bool {
        is_positive_definite(self.matrix())
    }
}

/// Declares that coordinates `0..dim_s` span the target subspace and the
/// remaining `dim_r` coordinates span its orthogonal complement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubspaceSplit {
    dim_s: usize,
    dim_r: usize,
}

impl SubspaceSplit {
    pub fn new(dim_s: usize, dim_r: usize) -> Result<Self> {
        if dim_s == 0 || dim_r == 0 {
            return Err(Error::InvalidArgument(format!(
                "subspace split needs dim_S >= 1 and dim_R >= 1, got {dim_s}+{dim_r}"
            )));
        }
        Ok(Self { dim_s, dim_r })
    }

    pub fn dim_s(&self) -> usize {
        self.dim_s
    }

    pub fn dim_r(&self) -> usize {
        self.dim_r
    }

    pub fn dim(&self) -> usize {
        self.dim_s + self.dim_r
    }

    /// Orthogonal projector `Π₀` onto the target subspace.
    pub fn projector_s(&self) -> QOperator {
        let mut d = vec![0.0; self.dim()];
        d[..self.dim_s].iter_mut().for_each(|x| *x = 1.0);
        QOperator::diag_real(&d)
    }

    /// Orthogonal projector `Π_R` onto the complement.
    pub fn projector_r(&self) -> QOperator {
        let mut d = vec![0.0; self.dim()];
        d[self.dim_s..].iter_mut().for_each(|x| *x = 1.0);
        QOperator::diag_real(&d)
    }
}

/// The `[S P; Q R]` partition of an operator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView {
    pub s: CMatrix,
    pub p: CMatrix,
    pub q: CMatrix,
    pub r: CMatrix,
}

impl BlockView {
    pub fn assemble(&self) -> QOperator {
        let ds = self.s.nrows();
        let dr = self.r.nrows();
        let mut m = CMatrix::zeros(ds + dr, ds + dr);
        m.view_mut((0, 0), (ds, ds)).copy_from(&self.s);
        m.view_mut((0, ds), (ds, dr)).copy_from(&self.p);
        m.view_mut((ds, 0), (dr, ds)).copy_from(&self.q);
        m.view_mut((ds, ds), (dr, dr)).copy_from(&self.r);
        QOperator::from_matrix_unchecked(m)
    }
}

pub fn block_split(a: &QOperator, split: &SubspaceSplit) -> Result<BlockView> {
    check_dim(split.dim(), a.dim())?;
    Ok(blocks(a.matrix(), split.dim_s()))
}

/// Raw block partition at row/column `ds`.
pub(crate) fn blocks(m: &CMatrix, ds: usize) -> BlockView {
    let n = m.nrows();
    let dr = n - ds;
    BlockView {
        s: m.view((0, 0), (ds, ds)).into_owned(),
        p: m.view((0, ds), (ds, dr)).into_owned(),
        q: m.view((ds, 0), (dr, ds)).into_owned(),
        r: m.view((ds, ds), (dr, dr)).into_owned(),
    }
}

/// `d₀(ρ) = ‖ρ − Π₀ρΠ₀‖`.
pub fn distance_d0(rho: &DensityMatrix, split: &SubspaceSplit) -> Result<f64> {
    check_dim(split.dim(), rho.dim())?;
    Ok(d0_raw(rho.matrix(), split.dim_s()))
}

pub(crate) fn d0_raw(m: &CMatrix, ds: usize) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i < ds && j < ds {
                continue;
            }
            acc += m[(i, j)].norm_sqr();
        }
    }
    acc.sqrt()
}

/// `1 − Tr(Π₀ρ)`, the population outside the target subspace.
pub fn outside_population_raw(m: &CMatrix, ds: usize) -> f64 {
    (ds..m.nrows()).map(|i| m[(i, i)].re).sum()
}

/// Outcome of [`repair_with_report`].
#[derive(Debug, Clone)]
pub struct RepairOutcome {
    pub state: DensityMatrix,
    /// Total weight of the negative eigenvalues that were clipped.
    pub clipped: f64,
}

/// Projects a near-density matrix back onto the state space.
///
/// The input must be within `10·tol` of Hermitian and of unit trace.
pub fn repair_state(a: &QOperator, tol: f64) -> Result<DensityMatrix> {
    repair_with_report(a.matrix(), tol).map(|o| o.state)
}

pub fn repair_with_report(a: &CMatrix, tol: f64) -> Result<RepairOutcome> {
    let herm_residual = (a - a.adjoint()).norm();
    let trace_error = (a.trace() - ONE).norm();
    if herm_residual > 10.0 * tol || trace_error > 10.0 * tol || !herm_residual.is_finite() {
        return Err(Error::RepairOutOfBudget {
            herm_residual,
            trace_error,
            step: None,
        });
    }
    let mut h = hermitian_part(a);
    if !is_positive_definite(&h) {
        let (values, vectors) = hermitian_eigen(&h);
        if values[0] < -REPAIR_FLOOR {
            let clipped: f64 = values.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
            let kept: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
            let total: f64 = kept.iter().sum();
            let mut scaled = vectors.clone();
            for (k, &v) in kept.iter().enumerate() {
                let w = C64::new((v / total).sqrt(), 0.0);
                scaled.column_mut(k).scale_mut(w.re);
            }
            let rebuilt = &scaled * scaled.adjoint();
            return Ok(RepairOutcome {
                state: DensityMatrix::from_matrix_unchecked(hermitian_part(&rebuilt)),
                clipped,
            });
        }
    }
    let tr = h.trace().re;
    if (tr - 1.0).abs() > REPAIR_FLOOR {
        h.scale_mut(1.0 / tr);
    }
    Ok(RepairOutcome {
        state: DensityMatrix::from_matrix_unchecked(h),
        clipped: 0.0,
    })
}

/// Orthonormal kernel / co-kernel split of a matrix, from one SVD.
#[derive(Debug, Clone)]
pub struct KernelSplit {
    /// Columns span `ker M` (n × k).
    pub kernel: CMatrix,
    /// Columns span `(ker M)^⊥` (n × (n−k)).
    pub complement: CMatrix,
    /// Singular values, descending (length n).
    pub singular_values: Vec<f64>,
}

fn guard_band(values: &[f64], tol: f64) -> Result<()> {
    for &v in values {
        if v > tol / 10.0 && v < tol * 10.0 {
            return Err(Error::RankAmbiguous { value: v, tol });
        }
    }
    Ok(())
}

/// Kernel of `m` (columns are the domain), with rank decided at `rank_tol`
/// and an ambiguity guard band of one decade on either side.
pub fn kernel_split(m: &CMatrix, rank_tol: f64) -> Result<KernelSplit> {
    let n = m.ncols();
    let rows = m.nrows().max(n);
    let mut padded = CMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
    let svd = SVD::try_new(padded, false, true, f64::EPSILON, 0).ok_or(Error::EigenSolverFailure)?;
    let v_t = svd.v_t.ok_or(Error::EigenSolverFailure)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    guard_band(&singular_values, rank_tol)?;
    let rank = singular_values.iter().filter(|&&s| s > rank_tol).count();
    let mut complement = CMatrix::zeros(n, rank);
    let mut kernel = CMatrix::zeros(n, n - rank);
    for (dst, &src) in order.iter().enumerate() {
        let col = v_t.row(src).adjoint();
        if dst < rank {
            complement.set_column(dst, &col);
        } else {
            kernel.set_column(dst - rank, &col);
        }
    }
    Ok(KernelSplit {
        kernel,
        complement,
        singular_values,
    })
}

/// Numerical rank at `rank_tol`, with the same guard band as [`kernel_split`].
pub fn numerical_rank(m: &CMatrix, rank_tol: f64) -> Result<usize> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0);
    }
    let svd = SVD::try_new(m.clone(), false, false, f64::EPSILON, 0).ok_or(Error::EigenSolverFailure)?;
    let values: Vec<f64> = svd.singular_values.iter().copied().collect();
    guard_band(&values, rank_tol)?;
    Ok(values.iter().filter(|&&s| s > rank_tol).count())
}

/// Largest singular value.
pub fn spectral_norm(m: &CMatrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    SVD::new(m.clone(), false, false)
        .singular_values
        .iter()
        .fold(0.0, |a: f64, &b| a.max(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn hs_norm_examples() {
        assert_eq!(hs_norm(&QOperator::identity(4)), 2.0);
        assert_eq!(hs_norm(&QOperator::zeros(3)), 0.0);
        assert_eq!(hs_norm(&QOperator::ket_bra(2, 0, 1)), 1.0);
    }

    #[test]
    fn qoperator_rejects_bad_input() {
        assert!(matches!(
            QOperator::new(CMatrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 1)] = c(f64::NAN, 0.0);
        assert_eq!(QOperator::new(m), Err(Error::NonFinite));
    }

    #[test]
    fn block_split_identity() {
        let split = SubspaceSplit::new(1, 2).unwrap();
        let b = block_split(&QOperator::identity(3), &split).unwrap();
        assert_eq!(b.s, CMatrix::identity(1, 1));
        assert_eq!(b.p, CMatrix::zeros(1, 2));
        assert_eq!(b.q, CMatrix::zeros(2, 1));
        assert_eq!(b.r, CMatrix::identity(2, 2));
    }

    #[test]
    fn block_split_ket_bra() {
        let split = SubspaceSplit::new(1, 1).unwrap();
        let b = block_split(&QOperator::ket_bra(2, 0, 1), &split).unwrap();
        assert_eq!(b.s[(0, 0)], ZERO);
        assert_eq!(b.p[(0, 0)], ONE);
        assert_eq!(b.q[(0, 0)], ZERO);
        assert_eq!(b.r[(0, 0)], ZERO);
    }

    #[test]
    fn block_split_dimension_mismatch() {
        let split = SubspaceSplit::new(1, 1).unwrap();
        assert!(matches!(
            block_split(&QOperator::identity(3), &split),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn split_requires_both_parts() {
        assert!(SubspaceSplit::new(0, 2).is_err());
        assert!(SubspaceSplit::new(2, 0).is_err());
    }

    #[test]
    fn d0_examples() {
        let split = SubspaceSplit::new(1, 1).unwrap();
        assert_eq!(distance_d0(&DensityMatrix::basis(2, 0), &split).unwrap(), 0.0);
        assert_eq!(distance_d0(&DensityMatrix::basis(2, 1), &split).unwrap(), 1.0);
        let mixed = DensityMatrix::diagonal(&[0.5, 0.5]).unwrap();
        assert_eq!(distance_d0(&mixed, &split).unwrap(), 0.5);
    }

    #[test]
    fn repair_fixed_point() {
        let rho = DensityMatrix::pure(&[c(0.6, 0.0), c(0.0, 0.8)]).unwrap();
        let out = repair_state(rho.op(), 1e-9).unwrap();
        assert!((out.matrix() - rho.matrix()).norm() < 1e-15);
    }

    #[test]
    fn repair_clips_and_renormalizes() {
        let a = QOperator::diag_real(&[1.0005, -0.0005]);
        let out = repair_with_report(a.matrix(), 1e-4).unwrap();
        assert!(
            (out.state.matrix()[(0, 0)] - ONE).norm() < 1e-15,
            "{}",
            out.state.matrix()
        );
        assert!(out.state.matrix()[(1, 1)].norm() < 1e-15);
        assert!((out.clipped - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn repair_out_of_budget() {
        let mut m = CMatrix::identity(2, 2) * c(0.5, 0.0);
        m[(0, 1)] = c(1e-7, 0.0);
        let err = repair_state(&QOperator::new(m).unwrap(), 1e-9).unwrap_err();
        assert!(matches!(err, Error::RepairOutOfBudget { .. }));
        let bad_trace = QOperator::diag_real(&[0.6, 0.6]);
        assert!(repair_state(&bad_trace, 1e-9).is_err());
    }

    #[test]
    fn kernel_of_wide_row() {
        let m = CMatrix::from_row_slice(1, 2, &[ONE, ZERO]);
        let k = kernel_split(&m, 1e-8).unwrap();
        assert_eq!(k.kernel.ncols(), 1);
        assert_eq!(k.complement.ncols(), 1);
        assert!(k.kernel[(0, 0)].norm() < 1e-15);
        assert!((k.kernel[(1, 0)].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_guard_band() {
        let m = CMatrix::from_row_slice(1, 1, &[c(1e-8, 0.0)]);
        assert!(matches!(numerical_rank(&m, 1e-8), Err(Error::RankAmbiguous { .. })));
        let m = CMatrix::from_row_slice(1, 1, &[c(1e-3, 0.0)]);
        assert_eq!(numerical_rank(&m, 1e-8).unwrap(), 1);
    }

    #[test]
    fn maximally_mixed_is_valid() {
        let rho = DensityMatrix::maximally_mixed(3);
        assert!(DensityMatrix::new(rho.op().clone(), &Tolerances::default()).is_ok());
        assert!(rho.is_positive_definite());
        assert!(!DensityMatrix::basis(2, 0).is_positive_definite());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mat(d: usize, v: &[f64]) -> CMatrix {
            CMatrix::from_fn(d, d, |i, j| {
                let k = 2 * (i * d + j);
                C64::new(v[k % v.len()], v[(k + 1) % v.len()])
            })
        }

        fn state(d: usize, v: &[f64]) -> CMatrix {
            let a = mat(d, v);
            let p = &a * a.adjoint();
            let t = p.trace();
            p / t
        }

        proptest! {
            #[test]
            fn hs_norm_is_a_norm(v in proptest::collection::vec(-2.0f64..2.0, 64), w in proptest::collection::vec(-2.0f64..2.0, 64), s in -3.0f64..3.0, d in 1usize..5) {
                let a = QOperator::new(mat(d, &v)).unwrap();
                let b = QOperator::new(mat(d, &w)).unwrap();
                prop_assert!((hs_norm(&a.scale(s)) - s.abs() * hs_norm(&a)).abs() <= 1e-12 * (1.0 + hs_norm(&a)));
                prop_assert!(hs_norm(&a.add(&b).unwrap()) <= hs_norm(&a) + hs_norm(&b) + 1e-12);
            }

            #[test]
            fn block_round_trip(v in proptest::collection::vec(-2.0f64..2.0, 64), ds in 1usize..4, dr in 1usize..4) {
                let split = SubspaceSplit::new(ds, dr).unwrap();
                let a = QOperator::new(mat(ds + dr, &v)).unwrap();
                prop_assert_eq!(block_split(&a, &split).unwrap().assemble(), a);
            }

            #[test]
            fn repair_idempotent(v in proptest::collection::vec(-1.0f64..1.0, 64), noise in proptest::collection::vec(-1e-9f64..1e-9, 64), d in 2usize..5) {
                let mut a = state(d, &v);
                a += mat(d, &noise);
                let once = repair_state(&QOperator::new(a).unwrap(), 1e-8).unwrap();
                let twice = repair_state(once.op(), 1e-8).unwrap();
                prop_assert_eq!(once.matrix(), twice.matrix());
                prop_assert!(once.op().hermiticity_residual() == 0.0);
            }

            #[test]
            fn d0_bounded_by_outside_population(v in proptest::collection::vec(-1.0f64..1.0, 64), ds in 1usize..3, dr in 1usize..3) {
                let split = SubspaceSplit::new(ds, dr).unwrap();
                let rho = DensityMatrix::from_matrix_unchecked(state(ds + dr, &v));
                let d0 = distance_d0(&rho, &split).unwrap();
                let pr = outside_population_raw(rho.matrix(), ds);
                prop_assert!(d0 <= 3f64.sqrt() * pr.max(0.0).sqrt() + 1e-12);
            }

            #[test]
            fn d0_zero_inside_target(v in proptest::collection::vec(-1.0f64..1.0, 32), ds in 1usize..3, dr in 1usize..3) {
                let split = SubspaceSplit::new(ds, dr).unwrap();
                let inner = state(ds, &v);
                let mut m = CMatrix::zeros(ds + dr, ds + dr);
                m.view_mut((0, 0), (ds, ds)).copy_from(&inner);
                let rho = DensityMatrix::from_matrix_unchecked(m);
                prop_assert_eq!(distance_d0(&rho, &split).unwrap(), 0.0);
            }
        }
    }
}
