use nalgebra::DMatrix;

use crate::belief::{StateLayout, VariableKey};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    NotAugmented,
    Rectangular,
    Squared,
    Relinearization,
}

/// One change to the inference problem, carrying the noise-weighted Jacobian
/// blocks over the involved old variables (and new variables, if any).
#[derive(Debug, Clone)]
pub struct InferenceChange {
    /// Involved old variables X^I, ordered; Jacobian columns follow this order.
    pub involved: Vec<VariableKey>,
    pub data: ChangeData,
}

#[derive(Debug, Clone)]
pub enum ChangeData {
    /// New factors over existing variables only.
    NotAugmented { block: DMatrix<f64> },
    /// New factors constraining both old and new variables, m > dim(new).
    Rectangular {
        old_block: DMatrix<f64>,
        new_block: DMatrix<f64>,
        new_vars: Vec<VariableKey>,
    },
    /// New factors whose total dimension equals dim(new); `new_block` square
    /// and invertible.
    Squared {
        old_block: DMatrix<f64>,
        new_block: DMatrix<f64>,
        new_vars: Vec<VariableKey>,
    },
    /// The same factor set linearized at two points: subtract `block_before`,
    /// add `block_after`. Both share the involved set and row count.
    Relinearization {
        block_before: DMatrix<f64>,
        block_after: DMatrix<f64>,
    },
}

impl InferenceChange {
    pub fn not_augmented(involved: Vec<VariableKey>, block: DMatrix<f64>) -> Result<Self> {
        check_cols("not-augmented block", &block, &involved)?;
        Ok(Self {
            involved,
            data: ChangeData::NotAugmented { block },
        })
    }

    pub fn rectangular(
        involved: Vec<VariableKey>,
        old_block: DMatrix<f64>,
        new_vars: Vec<VariableKey>,
        new_block: DMatrix<f64>,
    ) -> Result<Self> {
        check_cols("rectangular old block", &old_block, &involved)?;
        check_cols("rectangular new block", &new_block, &new_vars)?;
        if old_block.nrows() != new_block.nrows() {
            return Err(Error::DimensionMismatch {
                context: "rectangular row counts",
                expected: old_block.nrows(),
                actual: new_block.nrows(),
            });
        }
        Ok(Self {
            involved,
            data: ChangeData::Rectangular {
                old_block,
                new_block,
                new_vars,
            },
        })
    }

    pub fn squared(
        involved: Vec<VariableKey>,
        old_block: DMatrix<f64>,
        new_vars: Vec<VariableKey>,
        new_block: DMatrix<f64>,
    ) -> Result<Self> {
        check_cols("squared old block", &old_block, &involved)?;
        check_cols("squared new block", &new_block, &new_vars)?;
        let m = new_block.nrows();
        if m != new_block.ncols() || old_block.nrows() != m {
            return Err(Error::DimensionMismatch {
                context: "squared change must have m = dim(new)",
                expected: new_block.ncols(),
                actual: m,
            });
        }
        Ok(Self {
            involved,
            data: ChangeData::Squared {
                old_block,
                new_block,
                new_vars,
            },
        })
    }

    pub fn relinearization(
        involved: Vec<VariableKey>,
        block_before: DMatrix<f64>,
        block_after: DMatrix<f64>,
    ) -> Result<Self> {
        check_cols("relinearization before block", &block_before, &involved)?;
        check_cols("relinearization after block", &block_after, &involved)?;
        if block_before.nrows() != block_after.nrows() {
            return Err(Error::DimensionMismatch {
                context: "relinearization row counts",
                expected: block_before.nrows(),
                actual: block_after.nrows(),
            });
        }
        Ok(Self {
            involved,
            data: ChangeData::Relinearization {
                block_before,
                block_after,
            },
        })
    }

    pub fn kind(&self) -> ChangeKind {
        match &self.data {
            ChangeData::NotAugmented { .. } => ChangeKind::NotAugmented,
            ChangeData::Rectangular { .. } => ChangeKind::Rectangular,
            ChangeData::Squared { .. } => ChangeKind::Squared,
            ChangeData::Relinearization { .. } => ChangeKind::Relinearization,
        }
    }

    /// Total new-factor dimension m (for relinearization: rows of each block).
    pub fn rows(&self) -> usize {
        match &self.data {
            ChangeData::NotAugmented { block } => block.nrows(),
            ChangeData::Rectangular { old_block, .. } | ChangeData::Squared { old_block, .. } => {
                old_block.nrows()
            }
            ChangeData::Relinearization { block_after, .. } => block_after.nrows(),
        }
    }

    pub fn new_vars(&self) -> &[VariableKey] {
        match &self.data {
            ChangeData::Rectangular { new_vars, .. } | ChangeData::Squared { new_vars, .. } => {
                new_vars
            }
            _ => &[],
        }
    }

    /// Restricts the change to columns of variables not in `conditioning`
    /// (the conditional-update reduction): involved variables inside the
    /// conditioning set are dropped along with their Jacobian columns.
    pub fn restricted_to_unconditioned(&self, conditioning: &[VariableKey]) -> Self {
        let keep: Vec<usize> = self
            .involved
            .iter()
            .enumerate()
            .filter(|(_, k)| !conditioning.contains(k))
            .map(|(i, _)| i)
            .collect();
        if keep.len() == self.involved.len() {
            return self.clone();
        }
        let involved: Vec<VariableKey> = keep.iter().map(|&i| self.involved[i]).collect();
        let select = |block: &DMatrix<f64>| -> DMatrix<f64> {
            let mut cols = Vec::new();
            let mut off = 0;
            for (i, k) in self.involved.iter().enumerate() {
                if keep.contains(&i) {
                    cols.extend(off..off + k.dim());
                }
                off += k.dim();
            }
            block.select_columns(&cols)
        };
        let data = match &self.data {
            ChangeData::NotAugmented { block } => ChangeData::NotAugmented {
                block: select(block),
            },
            ChangeData::Rectangular {
                old_block,
                new_block,
                new_vars,
            } => ChangeData::Rectangular {
                old_block: select(old_block),
                new_block: new_block.clone(),
                new_vars: new_vars.clone(),
            },
            ChangeData::Squared {
                old_block,
                new_block,
                new_vars,
            } => ChangeData::Squared {
                old_block: select(old_block),
                new_block: new_block.clone(),
                new_vars: new_vars.clone(),
            },
            ChangeData::Relinearization {
                block_before,
                block_after,
            } => ChangeData::Relinearization {
                block_before: select(block_before),
                block_after: select(block_after),
            },
        };
        Self { involved, data }
    }
}

fn check_cols(context: &'static str, block: &DMatrix<f64>, keys: &[VariableKey]) -> Result<()> {
    let expected = StateLayout::dim_of(keys);
    if block.ncols() != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual: block.ncols(),
        });
    }
    Ok(())
}
