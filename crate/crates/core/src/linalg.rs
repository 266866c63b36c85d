//! Small dense helpers shared by the model validators, the sampler and the solver.

use nalgebra::{DMatrix, DVector};

/// Lower-triangular factor `L` with `L Lᵀ = A` for a symmetric positive
/// semidefinite `A`. Zero pivots are allowed (the column is left empty);
/// returns `None` when `A` is not PSD within `tol` (relative to its largest
/// diagonal entry).
pub fn psd_cholesky(a: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let scale = (0..n)
        .map(|i| a[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let eps = tol * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -eps {
            return None;
        }
        if d <= eps {
            // Degenerate direction: the rest of the column must vanish as well.
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > eps.sqrt() * scale.sqrt() + eps {
                    return None;
                }
            }
            continue;
        }
        let piv = d.sqrt();
        l[(j, j)] = piv;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / piv;
        }
    }
    Some(l)
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.amax().max(1.0);
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn is_psd(a: &DMatrix<f64>) -> bool {
    is_symmetric(a, 1e-9) && psd_cholesky(a, 1e-10).is_some()
}

/// Smallest and largest eigenvalue of a small symmetric matrix.
pub fn sym_eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = a.clone().symmetric_eigen();
    let lo = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
