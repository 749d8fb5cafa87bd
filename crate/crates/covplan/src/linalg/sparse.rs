//! Compressed sparse column storage for symmetric matrices.

use nalgebra::DMatrix;

/// Accumulates `(row, col, value)` entries; duplicates are summed on build.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// Adds `value` at `(row, col)` and mirrors it to `(col, row)`.
    pub fn add_sym(&mut self, row: usize, col: usize, value: f64) {
        self.add(row, col, value);
        if row != col {
            self.add(col, row, value);
        }
    }

    /// Adds a dense block with its top-left corner at `(row, col)`.
    pub fn add_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) {
        for c in 0..block.ncols() {
            for r in 0..block.nrows() {
                self.add(row + r, col + c, block[(r, c)]);
            }
        }
    }

    pub fn build(self) -> SparseSym {
        let n = self.n;
        let mut entries = self.entries;
        entries.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));

        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseSym {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }
}

/// Sparse symmetric matrix in CSC form; both triangles are stored explicitly.
#[derive(Debug, Clone)]
pub struct SparseSym {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Iterator over `(row, value)` of one column.
    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        self.row_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for (i, v) in self.col(j) {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn from_dense(mat: &DMatrix<f64>) -> Self {
        assert_eq!(mat.nrows(), mat.ncols());
        let mut b = TripletBuilder::new(mat.nrows());
        for j in 0..mat.ncols() {
            for i in 0..mat.nrows() {
                let v = mat[(i, j)];
                if v != 0.0 {
                    b.add(i, j, v);
                }
            }
        }
        b.build()
    }

    /// Symmetric permutation: `out[i, j] = self[perm[i], perm[j]]`.
    pub fn permute(&self, perm: &[usize]) -> SparseSym {
        assert_eq!(perm.len(), self.n);
        let mut inv = vec![0usize; self.n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut b = TripletBuilder::new(self.n);
        for j in 0..self.n {
            for (i, v) in self.col(j) {
                b.add(inv[i], inv[j], v);
            }
        }
        b.build()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let xj = x[j];
            if xj != 0.0 {
                for (i, v) in self.col(j) {
                    y[i] += v * xj;
                }
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn triplets_merge_duplicates() {
        let mut b = TripletBuilder::new(3);
        b.add(0, 0, 1.0);
        b.add(0, 0, 2.0);
        b.add_sym(0, 2, 5.0);
        b.add(1, 1, 4.0);
        let m = b.build();
        let d = m.to_dense();
        let expected = dmatrix![3.0, 0.0, 5.0; 0.0, 4.0, 0.0; 5.0, 0.0, 0.0];
        assert_eq!(d, expected);
    }

    #[test]
    fn permute_round_trip() {
        let dense = dmatrix![4.0, 1.0, 0.0; 1.0, 3.0, 2.0; 0.0, 2.0, 5.0];
        let m = SparseSym::from_dense(&dense);
        let perm = vec![2, 0, 1];
        let p = m.permute(&perm).to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p[(i, j)], dense[(perm[i], perm[j])]);
            }
        }
    }
}
