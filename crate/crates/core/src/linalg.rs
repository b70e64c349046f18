//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

pub fn matrix_power(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = a * &out;
    }
    out
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && m.clone().cholesky().is_some()
}

/// Solve `P = Aᵀ P A + Q` for symmetric `P` by vectorization.
///
/// Intended for the small state dimensions used here (n ≤ ~12).
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs.lu().solve(&rhs)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Some((&p + p.transpose()) * 0.5)
}

/// Rank of `[A − λI, B]` for a complex eigenvalue λ (PBH test).
pub fn pbh_rank(a: &DMatrix<f64>, b: &DMatrix<f64>, lambda: Complex<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut mat = DMatrix::<Complex<f64>>::zeros(n, n + m);
    for i in 0..n {
        for j in 0..n {
            mat[(i, j)] = Complex::new(a[(i, j)], 0.0);
        }
        mat[(i, i)] -= lambda;
        for j in 0..m {
            mat[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
        }
    }
    let sv = mat.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max).max(1.0);
    sv.iter().filter(|s| **s > 1e-9 * smax).count()
}
