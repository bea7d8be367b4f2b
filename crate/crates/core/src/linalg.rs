//! Small complex linear-algebra helpers shared by the solvers.
//!
//! All m×m systems in this crate are Hermitian positive definite by
//! construction (a PSD term plus a positive diagonal load), so every solve
//! goes through a Cholesky factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Cholesky factor of a Hermitian positive definite matrix.
pub fn hpd_factor(mat: CMatrix) -> Result<Cholesky<C64, Dyn>> {
    let dim = mat.nrows();
    Cholesky::new(mat)
        .ok_or_else(|| Error::Numeric(format!("{dim}x{dim} matrix is not positive definite")))
}

/// Inverse of a Hermitian positive definite matrix, symmetrized.
pub fn hpd_inverse(mat: CMatrix) -> Result<CMatrix> {
    let mut inv = hpd_factor(mat)?.inverse();
    hermitize(&mut inv);
    Ok(inv)
}

/// `log det` of a Hermitian positive definite matrix given its Cholesky factor.
pub fn log_det(chol: &Cholesky<C64, Dyn>) -> f64 {
    chol.l_dirty()
        .diagonal()
        .iter()
        .map(|d| 2.0 * d.re.ln())
        .sum()
}

/// Replaces `mat` with `(mat + mat†)/2`.
pub fn hermitize(mat: &mut CMatrix) {
    let dim = mat.nrows();
    for j in 0..dim {
        mat[(j, j)].im = 0.0;
        for i in (j + 1)..dim {
            let avg = (mat[(i, j)] + mat[(j, i)].conj()) * 0.5;
            mat[(i, j)] = avg;
            mat[(j, i)] = avg.conj();
        }
    }
}

/// Sherman–Morrison update of a cached inverse.
///
/// Given `inv = Σ⁻¹`, overwrites it with `(Σ + d·a·a†)⁻¹`. `u` must hold
/// `Σ⁻¹a` and `q` the quadratic form `a†Σ⁻¹a`; both are already computed by
/// the coordinate solvers, so they are passed in rather than recomputed.
pub fn rank_one_inverse_update(inv: &mut CMatrix, u: &CVector, q: f64, d: f64) {
    let denom = 1.0 + d * q;
    let scale = C64::new(-d / denom, 0.0);
    inv.gerc(scale, u, u, C64::new(1.0, 0.0));
}

/// Hermitian square root `U·diag(√λ)·U†` of a PSD matrix.
///
/// Eigenvalues in `[-tol·λmax, 0)` are treated as zero; anything more
/// negative is reported as a numeric failure.
pub fn psd_sqrt(mat: &CMatrix, tol: f64) -> Result<CMatrix> {
    let dim = mat.nrows();
    if dim == 0 {
        return Ok(mat.clone());
    }
    let eig = SymmetricEigen::new(mat.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lmin < -tol * lmax.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric(format!(
            "matrix is indefinite: smallest eigenvalue {lmin:e}, largest {lmax:e}"
        )));
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let root = lam.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(root);
    }
    let mut root = &scaled * eig.eigenvectors.adjoint();
    hermitize(&mut root);
    Ok(root)
}

/// Largest eigenvalue of a Hermitian matrix.
pub fn largest_eigenvalue(mat: &CMatrix) -> f64 {
    if mat.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(mat.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Max-abs entry of `a - b`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}
