//! Sparse Cholesky square root under a fill-reducing permutation.
//!
//! The factor is held as the lower-triangular `L` in CSC form with
//! `P Λ Pᵀ = L Lᵀ`. Column `j` of `L` is row `j` of the upper-triangular
//! square root `R = Lᵀ`, so row-oriented recovery formulas read columns here.

use nalgebra::DMatrix;

use super::sparse::SparseSym;
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Pivot tolerance: a diagonal d ≤ tol · max_diag is reported as not PD.
const PIVOT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SquareRootFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
    /// perm[k] = original index placed at permuted position k.
    perm: Vec<usize>,
    /// iperm[original] = permuted position.
    iperm: Vec<usize>,
}

/// Factorizes `lambda` under the given fill-reducing permutation
/// (`ordering[k]` = original index eliminated at step k).
pub fn factorize(lambda: &SparseSym, ordering: &[usize]) -> Result<SquareRootFactor> {
    let n = lambda.dim();
    assert_eq!(ordering.len(), n, "ordering length must match dimension");
    let permuted = lambda.permute(ordering);
    let mut iperm = vec![0usize; n];
    for (k, &orig) in ordering.iter().enumerate() {
        iperm[orig] = k;
    }

    let parent = etree(&permuted);

    // Symbolic pass: count entries per column of L.
    let mut counts = vec![1usize; n]; // diagonals
    {
        let mut mark = vec![NONE; n];
        let mut stack = vec![0usize; n];
        for k in 0..n {
            for j in ereach(&permuted, k, &parent, &mut mark, &mut stack) {
                counts[*j] += 1;
            }
        }
    }
    let mut col_ptr = vec![0usize; n + 1];
    for j in 0..n {
        col_ptr[j + 1] = col_ptr[j] + counts[j];
    }
    let nnz = col_ptr[n];
    let mut row_idx = vec![0usize; nnz];
    let mut values = vec![0.0f64; nnz];

    let max_diag = (0..n)
        .filter_map(|j| permuted.col(j).find(|&(i, _)| i == j).map(|(_, v)| v))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let pivot_floor = PIVOT_REL_TOL * max_diag;

    // Numeric up-looking pass: row k of L is solved against the already
    // finished columns, then scattered into column storage.
    let mut cursor: Vec<usize> = col_ptr[..n].to_vec();
    let mut x = vec![0.0f64; n];
    let mut mark = vec![NONE; n];
    let mut stack = vec![0usize; n];
    for k in 0..n {
        for (i, v) in permuted.col(k) {
            if i <= k {
                x[i] = v;
            }
        }
        let mut d = x[k];
        x[k] = 0.0;
        for &j in ereach(&permuted, k, &parent, &mut mark, &mut stack) {
            let ljj = values[col_ptr[j]];
            let lkj = x[j] / ljj;
            x[j] = 0.0;
            for p in (col_ptr[j] + 1)..cursor[j] {
                x[row_idx[p]] -= values[p] * lkj;
            }
            d -= lkj * lkj;
            row_idx[cursor[j]] = k;
            values[cursor[j]] = lkj;
            cursor[j] += 1;
        }
        if d <= pivot_floor {
            return Err(Error::NotPositiveDefinite { index: ordering[k] });
        }
        row_idx[cursor[k]] = k;
        values[cursor[k]] = d.sqrt();
        cursor[k] += 1;
    }

    Ok(SquareRootFactor {
        n,
        col_ptr,
        row_idx,
        values,
        perm: ordering.to_vec(),
        iperm,
    })
}

/// Elimination tree of a symmetric CSC matrix (upper triangle is used).
fn etree(a: &SparseSym) -> Vec<usize> {
    let n = a.dim();
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for (i, _) in a.col(k) {
            let mut i = i;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Pattern of row `k` of L (columns < k) in an order where every column
/// appears after the columns it depends on. Returns a slice of `stack`.
fn ereach<'s>(
    a: &SparseSym,
    k: usize,
    parent: &[usize],
    mark: &mut [usize],
    stack: &'s mut [usize],
) -> &'s [usize] {
    let n = parent.len();
    let mut top = n;
    mark[k] = k;
    for (i, _) in a.col(k) {
        if i > k {
            continue;
        }
        let mut i = i;
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        // move the path (collected leaf→root) onto the output end of the stack
        for s in 0..len {
            top -= 1;
            stack[top] = stack[len - 1 - s];
        }
    }
    &stack[top..]
}

impl SquareRootFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Builds a factor from a dense upper-triangular R with identity
    /// permutation. Zero diagonals are rejected.
    pub fn from_dense_upper(r: &DMatrix<f64>) -> Result<Self> {
        assert_eq!(r.nrows(), r.ncols());
        let n = r.nrows();
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        // column j of L = row j of R
        for j in 0..n {
            if r[(j, j)] == 0.0 {
                return Err(Error::SingularFactor { index: j });
            }
            col_ptr[j] = row_idx.len();
            for c in j..n {
                let v = r[(j, c)];
                if v != 0.0 {
                    row_idx.push(c);
                    values.push(v);
                }
            }
        }
        col_ptr[n] = row_idx.len();
        Ok(Self {
            n,
            col_ptr,
            row_idx,
            values,
            perm: (0..n).collect(),
            iperm: (0..n).collect(),
        })
    }

    /// Row `i` of R in permuted coordinates: `(column, value)` pairs with the
    /// diagonal first.
    pub fn sqrt_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.col_ptr[i];
        let hi = self.col_ptr[i + 1];
        self.row_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.values[self.col_ptr[i]]
    }

    /// Solves `Rᵀ y = b` (forward substitution), in place, permuted frame.
    pub fn solve_sqrt_transpose_in_place(&self, b: &mut [f64]) {
        for j in 0..self.n {
            let lo = self.col_ptr[j];
            let hi = self.col_ptr[j + 1];
            let yj = b[j] / self.values[lo];
            b[j] = yj;
            if yj != 0.0 {
                for p in (lo + 1)..hi {
                    b[self.row_idx[p]] -= self.values[p] * yj;
                }
            }
        }
    }

    /// Solves `R x = b` (backward substitution), in place, permuted frame.
    pub fn solve_sqrt_in_place(&self, b: &mut [f64]) {
        for j in (0..self.n).rev() {
            let lo = self.col_ptr[j];
            let hi = self.col_ptr[j + 1];
            let mut acc = b[j];
            for p in (lo + 1)..hi {
                acc -= self.values[p] * b[self.row_idx[p]];
            }
            b[j] = acc / self.values[lo];
        }
    }

    /// Solves `Λ x = b` in original coordinates.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut w: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        self.solve_sqrt_transpose_in_place(&mut w);
        self.solve_sqrt_in_place(&mut w);
        let mut out = vec![0.0; self.n];
        for k in 0..self.n {
            out[self.perm[k]] = w[k];
        }
        out
    }

    /// ln det Λ = 2 Σ ln diag(R).
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|j| 2.0 * self.diag(j).ln()).sum()
    }

    /// Dense R in permuted coordinates (diagnostics and small tests).
    pub fn sqrt_to_dense(&self) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.sqrt_row(i) {
                r[(i, j)] = v;
            }
        }
        r
    }

    /// `Σ^(:,Y)` column slab in original coordinates via two substitutions
    /// per requested column.
    pub fn covariance_columns(&self, cols: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, cols.len());
        let mut w = vec![0.0f64; self.n];
        for (c, &orig) in cols.iter().enumerate() {
            w.iter_mut().for_each(|v| *v = 0.0);
            w[self.iperm[orig]] = 1.0;
            self.solve_sqrt_transpose_in_place(&mut w);
            self.solve_sqrt_in_place(&mut w);
            for k in 0..self.n {
                out[(self.perm[k], c)] = w[k];
            }
        }
        out
    }

    /// Full covariance by column-wise backsubstitution, original coordinates.
    pub fn covariance_backsubstitution(&self) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.n).collect();
        self.covariance_columns(&all)
    }

    /// Full covariance by the back-to-front recursion on R's entries,
    /// original coordinates.
    pub fn covariance_recursive(&self) -> Result<DMatrix<f64>> {
        let n = self.n;
        for i in 0..n {
            if self.diag(i) == 0.0 {
                return Err(Error::SingularFactor { index: i });
            }
        }
        let mut sigma = DMatrix::zeros(n, n);
        for i in (0..n).rev() {
            let rii_inv = 1.0 / self.diag(i);
            for j in (i..n).rev() {
                let mut acc = if i == j { rii_inv } else { 0.0 };
                for (k, rik) in self.sqrt_row(i) {
                    if k > i {
                        acc -= rik * sigma[(k, j)];
                    }
                }
                let v = acc * rii_inv;
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
        // un-permute
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(self.perm[i], self.perm[j])] = sigma[(i, j)];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sparse::TripletBuilder;
    use crate::linalg::{min_degree_ordering, SparseSym};
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn identity_factorizes_to_identity() {
        let lambda = SparseSym::from_dense(&DMatrix::identity(4, 4));
        let f = factorize(&lambda, &[0, 1, 2, 3]).unwrap();
        assert_eq!(f.sqrt_to_dense(), DMatrix::identity(4, 4));
    }

    #[test]
    fn two_by_two_by_hand() {
        let lambda = SparseSym::from_dense(&dmatrix![4.0, 2.0; 2.0, 2.0]);
        let f = factorize(&lambda, &[0, 1]).unwrap();
        let r = f.sqrt_to_dense();
        assert_abs_diff_eq!(r, dmatrix![2.0, 1.0; 0.0, 1.0], epsilon = 1e-14);
    }

    fn random_sparse_spd(n: usize, rng: &mut ChaCha8Rng) -> SparseSym {
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 2.0 + rng.gen::<f64>() * 3.0);
        }
        let extra = n * 3;
        for _ in 0..extra {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i != j {
                b.add_sym(i, j, rng.gen::<f64>() * 0.4 - 0.2);
            }
        }
        let m = b.build();
        // guarantee diagonal dominance => SPD
        let dense = m.to_dense();
        let mut b2 = TripletBuilder::new(n);
        for i in 0..n {
            let row_sum: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| dense[(i, j)].abs())
                .sum();
            b2.add(i, i, dense[(i, i)] + row_sum + 0.1);
            for j in 0..n {
                if i != j && dense[(i, j)] != 0.0 {
                    b2.add(i, j, dense[(i, j)]);
                }
            }
        }
        b2.build()
    }

    #[test]
    fn random_sparse_matches_dense_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let n = 40 + trial * 6;
            let lambda = random_sparse_spd(n, &mut rng);
            let perm = min_degree_ordering(&lambda);
            let f = factorize(&lambda, &perm).unwrap();
            let r = f.sqrt_to_dense();
            let reconstructed = r.transpose() * &r;
            let permuted = lambda.permute(&perm).to_dense();
            assert!(
                rel_frob(&reconstructed, &permuted) < 1e-10,
                "RᵀR mismatch at n={n}"
            );

            // solve check against dense inverse
            let dense = lambda.to_dense();
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = f.solve(&rhs);
            let expected = dense
                .clone()
                .lu()
                .solve(&nalgebra::DVector::from_column_slice(&rhs))
                .unwrap();
            for i in 0..n {
                assert_abs_diff_eq!(x[i], expected[i], epsilon = 1e-8);
            }

            // log det
            let expected_ld = dense.clone().cholesky().unwrap().determinant().ln();
            assert_abs_diff_eq!(f.log_det(), expected_ld, epsilon = 1e-8);
        }
    }

    #[test]
    fn covariance_backsubstitution_matches_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lambda = random_sparse_spd(60, &mut rng);
        let perm = min_degree_ordering(&lambda);
        let f = factorize(&lambda, &perm).unwrap();
        let sigma = f.covariance_backsubstitution();
        let inv = lambda.to_dense().try_inverse().unwrap();
        assert!(rel_frob(&sigma, &inv) < 1e-9);
    }

    #[test]
    fn covariance_recursive_matches_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lambda = random_sparse_spd(50, &mut rng);
        let perm = min_degree_ordering(&lambda);
        let f = factorize(&lambda, &perm).unwrap();
        let sigma = f.covariance_recursive().unwrap();
        let inv = lambda.to_dense().try_inverse().unwrap();
        assert!(rel_frob(&sigma, &inv) < 1e-9);
    }

    #[test]
    fn covariance_columns_match_inverse_slab() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lambda = random_sparse_spd(80, &mut rng);
        let perm = min_degree_ordering(&lambda);
        let f = factorize(&lambda, &perm).unwrap();
        let cols = [3usize, 17, 42, 55, 79];
        let slab = f.covariance_columns(&cols);
        let inv = lambda.to_dense().try_inverse().unwrap();
        for (c, &col) in cols.iter().enumerate() {
            for i in 0..80 {
                assert_abs_diff_eq!(slab[(i, c)], inv[(i, col)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn non_pd_reports_original_index() {
        // 3x3 with a zero eigenvalue direction on the last original variable
        let dense = dmatrix![
            2.0, 0.0, 0.0;
            0.0, 1.0, 1.0;
            0.0, 1.0, 1.0
        ];
        let lambda = SparseSym::from_dense(&dense);
        let err = factorize(&lambda, &[0, 1, 2]).unwrap_err();
        match err {
            Error::NotPositiveDefinite { index } => assert_eq!(index, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn min_degree_reduces_fill_on_arrow() {
        // arrow matrix: natural order fills completely, hub-last order stays sparse
        let n = 30;
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 10.0);
        }
        for i in 1..n {
            b.add_sym(0, i, 1.0);
        }
        let lambda = b.build();
        let natural = factorize(&lambda, &(0..n).collect::<Vec<_>>()).unwrap();
        let perm = min_degree_ordering(&lambda);
        let ordered = factorize(&lambda, &perm).unwrap();
        assert!(ordered.nnz() < natural.nnz() / 3);
    }
}
