use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

use super::factors::GaussianFactor;
use super::state::{StateLayout, VariableKey};

/// Noise-whitened Jacobian of a factor batch, stored as block rows.
///
/// Columns outside the involved variables are implicitly zero. Against a base
/// layout the column blocks split into old (`A_old`, nonzero only on the
/// involved set) and new (`A_new`) partitions.
#[derive(Debug, Clone, Default)]
pub struct NoiseWeightedJacobian {
    pub rows: Vec<JacobianRow>,
    total_rows: usize,
}

#[derive(Debug, Clone)]
pub struct JacobianRow {
    pub factor_index: usize,
    pub row_offset: usize,
    pub dim: usize,
    pub blocks: Vec<(VariableKey, DMatrix<f64>)>,
}

impl NoiseWeightedJacobian {
    pub fn push_row(
        &mut self,
        factor_index: usize,
        blocks: Vec<(VariableKey, DMatrix<f64>)>,
    ) {
        let dim = blocks.first().map_or(0, |(_, b)| b.nrows());
        debug_assert!(blocks.iter().all(|(_, b)| b.nrows() == dim));
        self.rows.push(JacobianRow {
            factor_index,
            row_offset: self.total_rows,
            dim,
            blocks,
        });
        self.total_rows += dim;
    }

    /// Total residual dimension m.
    pub fn nrows(&self) -> usize {
        self.total_rows
    }

    /// Involved variables, deduplicated, in ascending key order.
    pub fn involved(&self) -> Vec<VariableKey> {
        let set: BTreeSet<VariableKey> = self
            .rows
            .iter()
            .flat_map(|r| r.blocks.iter().map(|(k, _)| *k))
            .collect();
        set.into_iter().collect()
    }

    /// Dense m × dim(keys) block over the given column variables; columns of
    /// variables absent from a row are zero.
    pub fn block_over(&self, keys: &[VariableKey]) -> DMatrix<f64> {
        let width = StateLayout::dim_of(keys);
        let mut offsets = Vec::with_capacity(keys.len());
        let mut off = 0;
        for k in keys {
            offsets.push(off);
            off += k.dim();
        }
        let mut out = DMatrix::zeros(self.total_rows, width);
        for row in &self.rows {
            for (k, b) in &row.blocks {
                if let Some(pos) = keys.iter().position(|kk| kk == k) {
                    out.view_mut((row.row_offset, offsets[pos]), (row.dim, k.dim()))
                        .copy_from(b);
                }
            }
        }
        out
    }

    /// Dense materialization over a full layout.
    pub fn to_dense(&self, layout: &StateLayout) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.total_rows, layout.dim());
        for row in &self.rows {
            for (k, b) in &row.blocks {
                let r = layout.range_of(*k)?;
                out.view_mut((row.row_offset, r.start), (row.dim, k.dim()))
                    .copy_from(b);
            }
        }
        Ok(out)
    }

    /// Λ-contribution AᵀA and η-contribution Aᵀb as triplet updates.
    pub fn scatter_normal_eqs(
        &self,
        layout: &StateLayout,
        residual: &DVector<f64>,
        triplets: &mut crate::linalg::TripletBuilder,
        eta: &mut DVector<f64>,
    ) -> Result<()> {
        for row in &self.rows {
            let r_slice = residual.rows(row.row_offset, row.dim);
            for (ka, ba) in &row.blocks {
                let ra = layout.range_of(*ka)?;
                let atb = ba.transpose() * r_slice;
                for i in 0..ka.dim() {
                    eta[ra.start + i] += atb[i];
                }
                for (kb, bb) in &row.blocks {
                    let rb = layout.range_of(*kb)?;
                    let prod = ba.transpose() * bb;
                    triplets.add_block(ra.start, rb.start, &prod);
                }
            }
        }
        Ok(())
    }
}

/// Linearizes a factor batch at `point`, returning the block Jacobian and the
/// whitened residual stack.
pub fn linearize_factors(
    factors: &[GaussianFactor],
    point: &DVector<f64>,
    layout: &StateLayout,
) -> Result<(NoiseWeightedJacobian, DVector<f64>)> {
    if point.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            context: "linearization point",
            expected: layout.dim(),
            actual: point.len(),
        });
    }
    let mut jac = NoiseWeightedJacobian::default();
    let total: usize = factors.iter().map(|f| f.dim()).sum();
    let mut residual = DVector::zeros(total);
    let mut offset = 0;
    for (fi, f) in factors.iter().enumerate() {
        let values: Vec<DVector<f64>> = f
            .involved
            .iter()
            .map(|&k| layout.read(point, k))
            .collect::<Result<_>>()?;
        let (blocks, r) = f.linearize_at(&values)?;
        jac.push_row(
            fi,
            f.involved.iter().copied().zip(blocks).collect(),
        );
        residual.rows_mut(offset, f.dim()).copy_from(&r);
        offset += f.dim();
    }
    Ok((jac, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::factors::FactorModel;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    #[test]
    fn zero_columns_for_uninvolved_variables() {
        let layout = StateLayout::new([
            VariableKey::pose(0),
            VariableKey::landmark(0),
            VariableKey::landmark(1),
        ]);
        let f = GaussianFactor::new(
            vec![VariableKey::pose(0), VariableKey::landmark(1)],
            FactorModel::RangeBearing,
            dvector![1.0, 0.0],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let point = DVector::from_vec(vec![0.0, 0.0, 0.0, 5.0, 5.0, 2.0, 0.0]);
        let (jac, _) = linearize_factors(std::slice::from_ref(&f), &point, &layout).unwrap();
        let dense = jac.to_dense(&layout).unwrap();
        // landmark 0 occupies scalar columns 3..5 and must be zero
        assert_eq!(dense.view((0, 3), (2, 2)).amax(), 0.0);
        assert!(dense.view((0, 0), (2, 3)).amax() > 0.0);
        assert!(dense.view((0, 5), (2, 2)).amax() > 0.0);

        let inv = jac.involved();
        assert_eq!(inv, vec![VariableKey::pose(0), VariableKey::landmark(1)]);

        let sub = jac.block_over(&inv);
        assert_abs_diff_eq!(sub.column(0), dense.column(0), epsilon = 1e-15);
        assert_abs_diff_eq!(sub.column(3), dense.column(5), epsilon = 1e-15);
    }
}
