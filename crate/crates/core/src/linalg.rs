//! Small dense linear-algebra helpers shared by the surrogate and the
//! acquisition machinery.

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Diagonal jitter ladder applied when a Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Cholesky of a symmetric positive definite matrix, climbing the jitter
/// ladder on failure. Returns the factorization and the jitter that was
/// actually added.
pub fn spd_cholesky(a: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = a.clone().cholesky() {
        return Ok((c, 0.0));
    }
    for &jit in JITTER_LADDER.iter() {
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += jit;
        }
        if let Some(c) = aj.cholesky() {
            return Ok((c, jit));
        }
    }
    Err(Error::CholeskyFailure {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

/// log-determinant from a Cholesky factor.
pub fn ln_det(chol: &nalgebra::Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Ordinary least-squares polynomial fit, returning coefficients in
/// ascending degree. Solved through SVD for stability on Vandermonde
/// systems; `xs` should be centered by the caller when conditioning matters.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Vec<f64> {
    let n = xs.len();
    assert!(n > 0 && degree < n, "polyfit needs more points than degree");
    let mut v = DMatrix::zeros(n, degree + 1);
    for (i, &x) in xs.iter().enumerate() {
        let mut p = 1.0;
        for j in 0..=degree {
            v[(i, j)] = p;
            p *= x;
        }
    }
    let b = DVector::from_column_slice(ys);
    let svd = v.svd(true, true);
    let coef = svd.solve(&b, 1e-12).expect("SVD solve cannot fail");
    coef.iter().copied().collect()
}

/// Evaluate an ascending-degree polynomial.
pub fn polyval(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}
