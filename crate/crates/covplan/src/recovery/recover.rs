use nalgebra::DMatrix;

use crate::error::Result;
use crate::linalg::SquareRootFactor;

/// Full covariance by the back-to-front recursion on the square-root factor's
/// entries. Output is in original (pre-permutation) coordinates.
pub fn recover_recursive(factor: &SquareRootFactor) -> Result<DMatrix<f64>> {
    factor.covariance_recursive()
}

/// Full covariance by two triangular substitutions per column. Must agree
/// with `recover_recursive` up to roundoff.
pub fn recover_backsubstitution(factor: &SquareRootFactor) -> DMatrix<f64> {
    factor.covariance_backsubstitution()
}

/// Covariance column slab Σ^(:,Y) for the given original scalar indices.
pub fn prior_columns(factor: &SquareRootFactor, columns: &[usize]) -> DMatrix<f64> {
    factor.covariance_columns(columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::linalg::{min_degree_ordering, SparseSym};
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_factor_recovers_identity() {
        let f = SquareRootFactor::from_dense_upper(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(recover_recursive(&f).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(recover_backsubstitution(&f), DMatrix::identity(3, 3));
    }

    #[test]
    fn two_by_two_matches_direct_inverse() {
        // R = [[2,1],[0,1]]: Σ must satisfy (RᵀR)Σ = I.
        let r = dmatrix![2.0, 1.0; 0.0, 1.0];
        let f = SquareRootFactor::from_dense_upper(&r).unwrap();
        let sigma = recover_recursive(&f).unwrap();
        let direct = (r.transpose() * &r).try_inverse().unwrap();
        assert_abs_diff_eq!(sigma, direct, epsilon = 1e-14);
        assert_abs_diff_eq!(
            sigma,
            dmatrix![0.5, -0.5; -0.5, 1.0],
            epsilon = 1e-14
        );
    }

    #[test]
    fn zero_diagonal_is_an_error() {
        let r = dmatrix![2.0, 1.0; 0.0, 0.0];
        let err = SquareRootFactor::from_dense_upper(&r).unwrap_err();
        assert!(matches!(err, Error::SingularFactor { index: 1 }));
    }

    fn random_sparse_upper(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(n, n);
        for i in 0..n {
            r[(i, i)] = 0.5 + rng.gen::<f64>();
            for j in (i + 1)..n {
                if rng.gen::<f64>() < 0.15 {
                    r[(i, j)] = rng.gen::<f64>() - 0.5;
                }
            }
        }
        r
    }

    #[test]
    fn random_sparse_factors_match_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let r = random_sparse_upper(50, &mut rng);
            let f = SquareRootFactor::from_dense_upper(&r).unwrap();
            let dense = (r.transpose() * &r).try_inverse().unwrap();
            let rec = recover_recursive(&f).unwrap();
            let back = recover_backsubstitution(&f);
            assert!((rec.clone() - &dense).norm() / dense.norm() < 1e-9);
            assert!((back.clone() - &dense).norm() / dense.norm() < 1e-9);
            assert!((rec - back).norm() / dense.norm() < 1e-9);
        }
    }

    #[test]
    fn prior_columns_single_variable_on_diagonal_information() {
        // Λ = diag(1, 4): the first variable's column is (1, 0)ᵀ.
        let lambda = SparseSym::from_dense(&dmatrix![1.0, 0.0; 0.0, 4.0]);
        let f = crate::linalg::cholesky::factorize(&lambda, &[0, 1]).unwrap();
        let slab = prior_columns(&f, &[0]);
        assert_abs_diff_eq!(slab[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(slab[(1, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn prior_columns_full_set_equals_full_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let r = random_sparse_upper(20, &mut rng);
        let f = SquareRootFactor::from_dense_upper(&r).unwrap();
        let all: Vec<usize> = (0..20).collect();
        let slab = prior_columns(&f, &all);
        let full = recover_backsubstitution(&f);
        assert_abs_diff_eq!(slab, full, epsilon = 1e-12);
    }

    #[test]
    fn prior_columns_match_dense_inverse_under_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // build SPD Λ with fill-reducing permutation in play
        let mut dense = DMatrix::<f64>::zeros(80, 80);
        for i in 0..80 {
            dense[(i, i)] = 3.0 + rng.gen::<f64>();
            for j in (i + 1)..80 {
                if rng.gen::<f64>() < 0.05 {
                    let v = rng.gen::<f64>() * 0.3 - 0.15;
                    dense[(i, j)] = v;
                    dense[(j, i)] = v;
                }
            }
        }
        let lambda = SparseSym::from_dense(&dense);
        let perm = min_degree_ordering(&lambda);
        let f = crate::linalg::cholesky::factorize(&lambda, &perm).unwrap();
        let cols = [4usize, 19, 33, 57, 78];
        let slab = prior_columns(&f, &cols);
        let inv = dense.try_inverse().unwrap();
        for (c, &col) in cols.iter().enumerate() {
            for i in 0..80 {
                assert_abs_diff_eq!(slab[(i, c)], inv[(i, col)], epsilon = 1e-9);
            }
        }
    }
}
