//! Small dense linear-algebra helpers shared by the kernel modules.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Jitter levels tried in order when a factorization fails.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// `(K + Kᵀ) / 2` in place.
pub fn symmetrize(k: &mut DMatrix<f64>) {
    let n = k.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (k[(i, j)] + k[(j, i)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(k: &DMatrix<f64>) -> f64 {
    if k.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(k.clone()).eigenvalues.min()
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm_sym(k: &DMatrix<f64>) -> f64 {
    if k.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(k.clone()).eigenvalues.amax()
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Largest absolute row sum.
pub fn inf_norm(k: &DMatrix<f64>) -> f64 {
    k.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Cholesky factor of `m + jitter·I`, escalating the jitter up to 1e-6.
/// The first attempt uses `first` (which may be zero).
pub fn cholesky_with_jitter(m: &DMatrix<f64>, first: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    let mut ladder = vec![first];
    ladder.extend(JITTER_LADDER.iter().copied().filter(|&j| j > first));
    for jitter in ladder {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
    }
    Err(Error::Numerical(format!(
        "Cholesky factorization of a {n}x{n} matrix failed with jitter up to 1e-6"
    )))
}

/// Symmetric square root `V diag(√max(λ,0)) Vᵀ` of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut v = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_psd() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let (c, j) = cholesky_with_jitter(&m, 0.0).unwrap();
        assert!(j > 0.0);
        let l = c.l();
        assert!((&l * l.transpose() - m).abs().max() < 1e-8);
    }

    #[test]
    fn indefinite_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(&m, 0.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let b = DMatrix::from_fn(4, 3, |i, j| (i as f64 - j as f64 * 0.7).sin());
        let m = &b * b.transpose();
        let s = psd_sqrt(&m);
        assert!((&s * &s - &m).abs().max() < 1e-12);
    }
}
