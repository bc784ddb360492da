//! Small dense linear-algebra helpers shared by the fitters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, RealField};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cholesky factorisation with a single bounded retry.
///
/// On failure the diagonal is inflated by `1e-9 * mean(diag)` and the factorisation is
/// attempted once more. `None` means both attempts failed.
pub fn cholesky_with_jitter(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let mean_diag = m.diagonal().sum() / n as f64;
    let mut retry = m.clone();
    if let Some(c) = Cholesky::new(m) {
        return Some(c);
    }
    let jitter = 1e-9 * mean_diag.abs();
    if !(jitter > 0.0) || !jitter.is_finite() {
        return None;
    }
    for i in 0..n {
        retry[(i, i)] += jitter;
    }
    Cholesky::new(retry)
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

pub fn symmetrize<T: RealField + Copy>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::from_subset(&0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Positive-semidefiniteness test for noise covariances.
///
/// The matrix is first rescaled to unit diagonal so that entries spanning many orders of
/// magnitude (e.g. `1e12` placeholders next to `1e-2`) do not swamp the eigenvalue
/// tolerance. Rows with a zero diagonal must be entirely zero.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    if n != m.ncols() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    if asymmetry(m) > 1e-9 {
        return false;
    }
    let mut scale = DVector::zeros(n);
    for i in 0..n {
        let d = m[(i, i)];
        if d < 0.0 {
            return false;
        }
        if d == 0.0 {
            if (0..n).any(|j| m[(i, j)] != 0.0) {
                return false;
            }
            scale[i] = 1.0;
        } else {
            scale[i] = 1.0 / d.sqrt();
        }
    }
    let mut scaled = m.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    symmetrize(&mut scaled);
    let eig = scaled.symmetric_eigenvalues();
    eig.iter().all(|&e| e >= -1e-9)
}

/// Symmetric matrix square root `A` with `A Aᵀ = m`, for sampling from PSD covariances
/// that may be singular.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return c.unpack();
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}
