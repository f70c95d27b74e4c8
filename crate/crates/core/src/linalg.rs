//! Small dense helpers on top of nalgebra used by the filter and the M-step.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

/// `(P + Pᵀ) / 2`, in place.
pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let avg = 0.5 * (p[(r, c)] + p[(c, r)]);
            p[(r, c)] = avg;
            p[(c, r)] = avg;
        }
    }
}

pub fn symmetrized(mut p: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut p);
    p
}

/// Cholesky factor of a symmetric matrix, retrying once with `ridge_scale * trace / n`
/// added to the diagonal. Returns the factor and whether the ridge was needed.
pub fn cholesky_with_ridge(
    m: &DMatrix<f64>,
    ridge_scale: f64,
) -> Option<(Cholesky<f64, Dyn>, bool)> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Some((chol, false));
    }
    let n = m.nrows().max(1) as f64;
    let trace = m.trace();
    let ridge = if trace > 0.0 && trace.is_finite() {
        ridge_scale * trace / n
    } else {
        ridge_scale
    };
    let mut ridged = m.clone();
    for i in 0..m.nrows() {
        ridged[(i, i)] += ridge;
    }
    Cholesky::new(ridged).map(|chol| (chol, true))
}

/// `log |L Lᵀ|` from a Cholesky factor.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Symmetry to `1e-10` relative to the largest entry and smallest eigenvalue
/// `≥ -1e-10 · ‖P‖_F`.
pub fn is_symmetric_psd(p: &DMatrix<f64>) -> bool {
    if !p.is_square() || p.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = p.amax().max(f64::MIN_POSITIVE);
    let n = p.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            if (p[(r, c)] - p[(c, r)]).abs() > 1e-10 * scale {
                return false;
            }
        }
    }
    let eig = SymmetricEigen::new(symmetrized(p.clone()));
    let min = eig.eigenvalues.min();
    min >= -1e-10 * p.norm()
}

/// Clamp the eigenvalues of a symmetric matrix from below. Matrices already
/// above the floor are returned untouched.
pub fn eigen_floor(p: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(p.clone());
    if eig.eigenvalues.min() >= floor {
        return p;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrized(rebuilt)
}
