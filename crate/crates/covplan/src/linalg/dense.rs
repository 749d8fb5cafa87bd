//! Small dense helpers shared by the update kernels and oracles.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// (X + Xᵀ)/2, used to guard Cholesky inputs against drift.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// ln det of an SPD matrix via Cholesky.
pub fn spd_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { index: 0 })?;
    Ok(chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum())
}

/// Solves `X · Uᵀ U = B`, i.e. `X = B · (UᵀU)⁻¹`, given the upper-triangular
/// Cholesky root U. Mirrors the right-division-by-`chol` idiom.
pub fn div_by_gram_of_upper(b: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    // X = B U⁻¹ U⁻ᵀ: first Y = B U⁻¹ (solve Yᵀ from Uᵀ Yᵀ = Bᵀ), then X = Y U⁻ᵀ.
    let yt = u
        .transpose()
        .solve_lower_triangular(&b.transpose())
        .expect("upper factor has nonzero diagonal");
    let xt = u
        .solve_upper_triangular(&yt)
        .expect("upper factor has nonzero diagonal");
    xt.transpose()
}

/// `B · U⁻¹` for upper-triangular U (the right-division by a Cholesky root).
pub fn div_by_upper(b: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let xt = u
        .transpose()
        .solve_lower_triangular(&b.transpose())
        .expect("upper factor has nonzero diagonal");
    xt.transpose()
}

/// Upper-triangular Cholesky root of an SPD matrix (A = UᵀU).
pub fn chol_upper(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or(Error::InconsistentDowndate)?;
    Ok(chol.l().transpose())
}

/// Relative Frobenius distance, guarding the zero-matrix case.
pub fn rel_frobenius(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let denom = reference.norm();
    if denom < 1e-300 {
        a.norm()
    } else {
        (a - reference).norm() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    #[test]
    fn right_division_matches_inverse() {
        let a = dmatrix![4.0, 1.0; 1.0, 3.0];
        let u = chol_upper(&a).unwrap();
        let b = dmatrix![1.0, 2.0; 0.5, -1.0; 3.0, 0.0];
        let x = div_by_gram_of_upper(&b, &u);
        let expected = &b * a.try_inverse().unwrap();
        assert_abs_diff_eq!(x, expected, epsilon = 1e-12);

        let y = div_by_upper(&b, &u);
        let expected = &b * u.try_inverse().unwrap();
        assert_abs_diff_eq!(y, expected, epsilon = 1e-12);
    }

    #[test]
    fn log_det_matches_lu() {
        let a = dmatrix![4.0, 1.0, 0.0; 1.0, 3.0, 0.5; 0.0, 0.5, 2.0];
        let ld = spd_log_det(&a).unwrap();
        assert_abs_diff_eq!(ld, a.determinant().ln(), epsilon = 1e-12);
    }
}
