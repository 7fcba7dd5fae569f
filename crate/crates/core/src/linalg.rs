//! Dense linear-algebra primitives shared by every flow.
//!
//! Symmetric operators are carried by [`SymmetricMatrix`], a checked newtype over
//! `DMatrix<f64>`. Rectangular operands (features, readouts, labels, Jacobians) are plain
//! [`GeneralMatrix`] values. Every function here is pure.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FlowError, Result};

/// Rectangular dense matrix.
pub type GeneralMatrix = DMatrix<f64>;

/// Default relative rank tolerance (relative to the largest singular value).
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Absolute symmetry tolerance, scaled by `max(1, max |a_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Tolerance below which a negative eigenvalue is treated as round-off, scaled by
/// `max(1, max |eigenvalue|)`.
pub const PSD_TOL: f64 = 1e-10;

/// Square real matrix whose entries satisfy `a_ij == a_ji` within [`SYMMETRY_TOL`].
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Checked constructor: square, finite and symmetric within tolerance.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(FlowError::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("symmetric matrix"));
        }
        let asym = max_asymmetry(&m);
        let scale = m.amax().max(1.0);
        if asym > SYMMETRY_TOL * scale {
            return Err(FlowError::NotSymmetric(asym));
        }
        Ok(Self(m))
    }

    /// Returns `(m + mᵀ)/2`. Panics if `m` is not square.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "symmetrize needs a square matrix");
        let t = m.transpose();
        Self((m + t) * 0.5)
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Builds `U diag(values) Uᵀ`.
    pub fn from_eigen(values: &[f64], vectors: &DMatrix<f64>) -> Self {
        let mut scaled = vectors.clone();
        for (j, v) in values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*v);
        }
        Self::symmetrize(scaled * vectors.transpose())
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

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(&self.0 * c)
    }

    pub fn add(&self, other: &SymmetricMatrix) -> Self {
        Self(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymmetricMatrix) -> Self {
        Self(&self.0 - &other.0)
    }

    /// `self + c·I`.
    pub fn shift(&self, c: f64) -> Self {
        let mut m = self.0.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += c;
        }
        Self(m)
    }
}

impl Deref for SymmetricMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in eigenvalue order.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> SymmetricMatrix {
        SymmetricMatrix::from_eigen(&self.eigenvalues, &self.eigenvectors)
    }

    /// First `r` eigenvector columns.
    pub fn top_vectors(&self, r: usize) -> DMatrix<f64> {
        self.eigenvectors.columns(0, r).into_owned()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// Number of eigenvalues above `rel · λ_max` (0 when `λ_max ≤ 0`).
    pub fn count_above(&self, rel: f64) -> usize {
        let top = self.max_eigenvalue();
        if top <= 0.0 {
            return 0;
        }
        self.eigenvalues.iter().filter(|&&v| v > rel * top).count()
    }
}

/// Symmetric eigendecomposition with descending eigenvalues.
pub fn sym_eig(s: &SymmetricMatrix) -> Result<EigenDecomposition> {
    if !s.is_finite() {
        return Err(FlowError::NonFinite("sym_eig input"));
    }
    let n = s.dim();
    if n == 0 {
        return Ok(EigenDecomposition { eigenvalues: vec![], eigenvectors: DMatrix::zeros(0, 0) });
    }
    let eig = s.as_matrix().clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps backend order among ties.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (j, &i) in order.iter().enumerate() {
        eigenvectors.set_column(j, &eig.eigenvectors.column(i));
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// Clips negative eigenvalues to zero. PSD inputs are returned unchanged; inputs with
/// non-finite entries are returned unchanged as well.
pub fn psd_project(s: &SymmetricMatrix) -> SymmetricMatrix {
    let Ok(eig) = sym_eig(s) else {
        return s.clone();
    };
    if eig.min_eigenvalue() >= 0.0 {
        return s.clone();
    }
    let clipped: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    SymmetricMatrix::from_eigen(&clipped, &eig.eigenvectors)
}

fn check_psd(eig: &EigenDecomposition) -> Result<()> {
    let scale = eig
        .eigenvalues
        .iter()
        .fold(1.0f64, |acc, v| acc.max(v.abs()));
    let low = eig.min_eigenvalue();
    if low < -PSD_TOL * scale {
        return Err(FlowError::NotPsd(low));
    }
    Ok(())
}

/// `S^{†-1/2}`: eigenvalues above `rank_tol · λ_max` map to `λ^{-1/2}`, the rest to 0.
pub fn pinv_sqrt(s: &SymmetricMatrix, rank_tol: f64) -> Result<SymmetricMatrix> {
    let eig = sym_eig(s)?;
    check_psd(&eig)?;
    let top = eig.max_eigenvalue();
    if top <= 0.0 {
        return Ok(SymmetricMatrix::zeros(s.dim()));
    }
    let mapped: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| if v > rank_tol * top { v.powf(-0.5) } else { 0.0 })
        .collect();
    Ok(SymmetricMatrix::from_eigen(&mapped, &eig.eigenvectors))
}

/// Principal square root of a PSD matrix.
pub fn psd_sqrt(s: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let eig = sym_eig(s)?;
    check_psd(&eig)?;
    let mapped: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(SymmetricMatrix::from_eigen(&mapped, &eig.eigenvectors))
}

/// Full SVD `(U, s, Vᵀ)` whose reconstruction has been verified.
///
/// The bidiagonal SVD returns wrong factorizations for some rank-deficient inputs. The
/// lower-triangular factor `Rᵀ` of a QR reduction has proved reliable, so it is tried
/// first, then the direct SVD, then the eigendecomposition of `GᵀG`.
pub fn checked_svd(g: &GeneralMatrix) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if g.nrows() < g.ncols() {
        let (v, s, ut) = checked_svd(&g.transpose());
        return (ut.transpose(), s, v.transpose());
    }
    let tol = 64.0 * f64::EPSILON * (g.nrows().max(g.ncols()) as f64) * g.norm().max(f64::MIN_POSITIVE);
    let accept = |u: &DMatrix<f64>, s: &[f64], vt: &DMatrix<f64>| {
        let rec = u * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(s)) * vt;
        (rec - g).norm() <= tol
    };
    let split = |m: GeneralMatrix| {
        let svd = m.svd(true, true);
        let s: Vec<f64> = svd.singular_values.iter().copied().collect();
        (svd.u.expect("left singular vectors requested"), s, svd.v_t.expect("right singular vectors requested"))
    };
    let qr = g.clone().qr();
    let q = qr.q();
    let (ur, s, vrt) = split(qr.r().transpose());
    let (u, vt) = (&q * vrt.transpose(), ur.transpose());
    if accept(&u, &s, &vt) {
        return (u, s, vt);
    }
    let (u, s, vt) = split(g.clone());
    if accept(&u, &s, &vt) {
        return (u, s, vt);
    }
    let gram = SymmetricMatrix::symmetrize(g.transpose() * g);
    let eig = sym_eig(&gram).expect("Gram matrix of a finite matrix is finite");
    let top = eig.max_eigenvalue().max(0.0).sqrt();
    let mut u = DMatrix::zeros(g.nrows(), eig.eigenvalues.len());
    let mut s = Vec::with_capacity(eig.eigenvalues.len());
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let sv = lam.max(0.0).sqrt();
        if sv > f64::EPSILON * top {
            u.set_column(j, &(g * eig.eigenvectors.column(j) / sv));
        }
        s.push(sv);
    }
    (u, s, eig.eigenvectors.transpose())
}

/// Compact SVD restricted to singular values above `rank_tol · s_max`.
/// Returns `(U_r, s_r, V_r)` with `U_r` of shape rows×r and `V_r` of shape cols×r.
pub fn compact_svd(g: &GeneralMatrix, rank_tol: f64) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, cols) = g.shape();
    if rows == 0 || cols == 0 || g.iter().all(|&v| v == 0.0) {
        return (DMatrix::zeros(rows, 0), vec![], DMatrix::zeros(cols, 0));
    }
    let (u, sv, vt) = checked_svd(g);
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let top = sv[order[0]];
    let keep: Vec<usize> = order.into_iter().filter(|&i| sv[i] > rank_tol * top).collect();
    let mut ur = DMatrix::zeros(rows, keep.len());
    let mut vr = DMatrix::zeros(cols, keep.len());
    let mut sr = Vec::with_capacity(keep.len());
    for (j, &i) in keep.iter().enumerate() {
        ur.set_column(j, &u.column(i));
        vr.set_column(j, &vt.row(i).transpose());
        sr.push(sv[i]);
    }
    (ur, sr, vr)
}

/// Singular values sorted descending.
pub fn singular_values(g: &GeneralMatrix) -> Vec<f64> {
    if g.nrows() == 0 || g.ncols() == 0 {
        return vec![];
    }
    let mut s = checked_svd(g).1;
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of singular values above `rank_tol · s_max`.
pub fn numerical_rank(g: &GeneralMatrix, rank_tol: f64) -> usize {
    let s = singular_values(g);
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&v| v > rank_tol * top).count(),
        _ => 0,
    }
}

/// Orthonormal basis of the column space of `g` at `rank_tol`.
pub fn column_space(g: &GeneralMatrix, rank_tol: f64) -> DMatrix<f64> {
    compact_svd(g, rank_tol).0
}

/// Polar direction `UVᵀ` of the compact SVD of `g`.
pub fn polar_direction(g: &GeneralMatrix, rank_tol: f64) -> GeneralMatrix {
    let (u, _, v) = compact_svd(g, rank_tol);
    if u.ncols() == 0 {
        return DMatrix::zeros(g.nrows(), g.ncols());
    }
    u * v.transpose()
}

/// Cubic Newton–Schulz iterate `X ← 1.5X − 0.5XXᵀX` started from `G/‖G‖_F`.
pub fn newton_schulz_polar(g: &GeneralMatrix, iterations: usize) -> GeneralMatrix {
    let norm = g.norm();
    if norm == 0.0 {
        return g.clone();
    }
    let mut x = g / norm;
    for _ in 0..iterations {
        let xxt_x = &x * (x.transpose() * &x);
        x = &x * 1.5 - xxt_x * 0.5;
    }
    x
}

/// `‖AB − BA‖_F / (‖A‖_F‖B‖_F + ε_machine)`.
pub fn commutator_norm(a: &SymmetricMatrix, b: &SymmetricMatrix) -> f64 {
    let ab = a.as_matrix() * b.as_matrix();
    let ba = b.as_matrix() * a.as_matrix();
    (ab - ba).norm() / (a.norm() * b.norm() + f64::EPSILON)
}

/// Count of eigenvalues above `rel_threshold · λ_max`; 0 for the zero matrix.
pub fn effective_rank(s: &SymmetricMatrix, rel_threshold: f64) -> usize {
    match sym_eig(s) {
        Ok(eig) => eig.count_above(rel_threshold),
        Err(_) => 0,
    }
}

/// Count of eigenvalues with `|λ| > rel_threshold · max|λ|`; the rank of an indefinite
/// symmetric matrix.
pub fn symmetric_rank(s: &SymmetricMatrix, rel_threshold: f64) -> usize {
    let Ok(eig) = sym_eig(s) else {
        return 0;
    };
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if top == 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|v| v.abs() > rel_threshold * top).count()
}

/// `‖U1ᵀU2‖_F² / min(r1, r2)` for orthonormal column sets.
pub fn subspace_overlap(u1: &DMatrix<f64>, u2: &DMatrix<f64>) -> f64 {
    let r = u1.ncols().min(u2.ncols());
    if r == 0 {
        return if u1.ncols() == u2.ncols() { 1.0 } else { 0.0 };
    }
    let cross = u1.transpose() * u2;
    cross.norm_squared() / r as f64
}

/// Frobenius inner product `⟨A, B⟩ = Tr(AᵀB)`.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// `uᵢᵀ S uᵢ` for every column `uᵢ` of `basis`.
pub fn rayleigh_quotients(s: &SymmetricMatrix, basis: &DMatrix<f64>) -> Vec<f64> {
    let sb = s.as_matrix() * basis;
    (0..basis.ncols())
        .map(|j| basis.column(j).dot(&sb.column(j)))
        .collect()
}

/// An orthonormal basis that diagonalizes two commuting symmetric matrices: the
/// eigenvectors of a generic linear combination of the two.
pub fn joint_eigenbasis(a: &SymmetricMatrix, b: &SymmetricMatrix) -> Result<DMatrix<f64>> {
    const MIX: f64 = 0.618_033_988_749_894_8;
    let na = a.norm().max(f64::MIN_POSITIVE);
    let nb = b.norm().max(f64::MIN_POSITIVE);
    let combo = a.scale(1.0 / na).add(&b.scale(MIX / nb));
    Ok(sym_eig(&combo)?.eigenvectors)
}

/// Matrix with i.i.d. standard normal entries.
pub fn random_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `n×k` matrix with orthonormal columns (`k ≤ n`), from a QR of a Gaussian matrix.
pub fn random_orthonormal<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(k <= n, "cannot draw {k} orthonormal columns in dimension {n}");
    if k == 0 {
        return DMatrix::zeros(n, 0);
    }
    let q = random_gaussian(n, k, rng).qr().q();
    q.columns(0, k).into_owned()
}

/// Random symmetric matrix `(G + Gᵀ)/2` with Gaussian `G`.
pub fn random_symmetric<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SymmetricMatrix {
    SymmetricMatrix::symmetrize(random_gaussian(n, n, rng))
}

/// Random PSD matrix `GGᵀ/rank` with Gaussian `G` of shape `n×rank`.
pub fn random_psd<R: Rng + ?Sized>(n: usize, rank: usize, rng: &mut R) -> SymmetricMatrix {
    let g = random_gaussian(n, rank, rng);
    SymmetricMatrix::symmetrize(&g * g.transpose() / rank.max(1) as f64)
}
