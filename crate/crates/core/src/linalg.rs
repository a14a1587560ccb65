//! Small dense linear-algebra helpers shared by the filter and the QP solver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric matrix. On failure a jitter
/// `δI` is added, starting at `1e-12·tr/n` and escalating ×10 up to
/// `1e-6·tr/n`.
pub fn jittered_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.l());
    }
    let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut delta = 1e-12 * scale;
    while delta <= 1e-6 * scale * (1.0 + 1e-9) {
        let shifted = a + DMatrix::identity(n, n) * delta;
        if let Some(ch) = shifted.cholesky() {
            return Ok(ch.l());
        }
        delta *= 10.0;
    }
    Err(Error::IndefiniteCovariance(format!(
        "Cholesky failed with jitter up to {:.3e} (trace/n = {scale:.3e}, min eigenvalue {:.3e})",
        1e-6 * scale,
        min_eigenvalue(a)
    )))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn clip_to_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return symmetrize(a);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
