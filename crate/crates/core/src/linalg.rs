//! Dense least squares shared by identification and VRFT.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative threshold on |R_ii| below which an unregularized problem is
/// treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Solves `min ||A X - B||_F^2 + ridge ||X||_F^2` column by column.
///
/// `ridge > 0` goes through a Cholesky factorization of the regularized
/// normal matrix; `ridge == 0` uses Householder QR on `A` directly.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "design has {} rows, targets have {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::Config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let cols = a.ncols();
    if ridge > 0.0 {
        let mut normal = a.transpose() * a;
        for i in 0..cols {
            normal[(i, i)] += ridge;
        }
        let rhs = a.transpose() * b;
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::Singular("regularized normal matrix is not positive definite".into()))?;
        return Ok(chol.solve(&rhs));
    }

    if a.nrows() < cols {
        return Err(Error::Singular(format!(
            "{} equations for {cols} unknowns; use ridge > 0 or more data",
            a.nrows()
        )));
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag_max = (0..cols).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if diag_max == 0.0 || (0..cols).any(|i| r[(i, i)].abs() <= RANK_TOL * diag_max) {
        return Err(Error::Singular(
            "design matrix is rank deficient; use ridge > 0 or richer excitation".into(),
        ));
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))
}
