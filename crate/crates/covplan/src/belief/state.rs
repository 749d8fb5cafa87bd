use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SparseSym, SquareRootFactor};

use super::factors::GaussianFactor;

/// Wraps an angle to (−π, π].
pub(crate) fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarKind {
    /// Planar pose (x, y, θ), 3 scalars.
    Pose,
    /// Point landmark (x, y), 2 scalars.
    Landmark,
}

/// Identifier of one state variable. The scalar dimension is fixed by kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableKey {
    pub kind: VarKind,
    pub index: usize,
}

impl VariableKey {
    pub fn pose(index: usize) -> Self {
        Self {
            kind: VarKind::Pose,
            index,
        }
    }

    pub fn landmark(index: usize) -> Self {
        Self {
            kind: VarKind::Landmark,
            index,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            VarKind::Pose => 3,
            VarKind::Landmark => 2,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            VarKind::Pose => format!("x{}", self.index),
            VarKind::Landmark => format!("l{}", self.index),
        }
    }
}

/// Ordered variable set with contiguous scalar ranges.
#[derive(Debug, Clone, Default)]
pub struct StateLayout {
    keys: Vec<VariableKey>,
    offsets: Vec<usize>,
    slots: HashMap<VariableKey, usize>,
    total: usize,
}

impl StateLayout {
    pub fn new(keys: impl IntoIterator<Item = VariableKey>) -> Self {
        let mut layout = Self::default();
        for k in keys {
            layout.push(k);
        }
        layout
    }

    /// Appends a variable; panics on duplicates (a layout is a set).
    pub fn push(&mut self, key: VariableKey) {
        assert!(
            self.slots.insert(key, self.keys.len()).is_none(),
            "duplicate variable {key:?} in layout"
        );
        self.offsets.push(self.total);
        self.total += key.dim();
        self.keys.push(key);
    }

    /// New layout extended by `new_keys` (appended after existing ones).
    pub fn extended(&self, new_keys: &[VariableKey]) -> Self {
        let mut out = self.clone();
        for &k in new_keys {
            out.push(k);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn contains(&self, key: VariableKey) -> bool {
        self.slots.contains_key(&key)
    }

    pub fn offset_of(&self, key: VariableKey) -> Result<usize> {
        self.slots
            .get(&key)
            .map(|&s| self.offsets[s])
            .ok_or(Error::UnknownVariable(key))
    }

    /// Scalar index range of a variable.
    pub fn range_of(&self, key: VariableKey) -> Result<std::ops::Range<usize>> {
        let off = self.offset_of(key)?;
        Ok(off..off + key.dim())
    }

    /// Variable owning scalar index `idx`.
    pub fn key_at(&self, idx: usize) -> VariableKey {
        debug_assert!(idx < self.total);
        let slot = match self.offsets.binary_search(&idx) {
            Ok(s) => s,
            Err(s) => s - 1,
        };
        self.keys[slot]
    }

    /// Total scalar dimension of a key list.
    pub fn dim_of(keys: &[VariableKey]) -> usize {
        keys.iter().map(|k| k.dim()).sum()
    }

    /// Scalar indices of `keys` in this layout, concatenated in key order.
    pub fn scalar_indices(&self, keys: &[VariableKey]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(Self::dim_of(keys));
        for &k in keys {
            out.extend(self.range_of(k)?);
        }
        Ok(out)
    }

    /// Reads the sub-vector of `x` belonging to `key`.
    pub fn read(&self, x: &DVector<f64>, key: VariableKey) -> Result<DVector<f64>> {
        let r = self.range_of(key)?;
        Ok(DVector::from_column_slice(&x.as_slice()[r]))
    }
}

/// A factor graph: factors plus the layout they constrain.
#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    pub layout: StateLayout,
    pub factors: Vec<GaussianFactor>,
}

impl FactorGraph {
    pub fn new(layout: StateLayout) -> Self {
        Self {
            layout,
            factors: Vec::new(),
        }
    }

    pub fn add_factor(&mut self, factor: GaussianFactor) {
        for &k in &factor.involved {
            assert!(
                self.layout.contains(k),
                "factor references unknown variable {k:?}"
            );
        }
        self.factors.push(factor);
    }

    /// Indices of factors touching any of `vars`.
    pub fn factors_touching(&self, vars: &[VariableKey]) -> Vec<usize> {
        let set: std::collections::HashSet<_> = vars.iter().copied().collect();
        self.factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.involved.iter().any(|k| set.contains(k)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Information-form Gaussian belief with its square-root factorization.
///
/// Immutable after construction; updates produce new values.
#[derive(Debug, Clone)]
pub struct BeliefState {
    pub layout: StateLayout,
    pub mean: DVector<f64>,
    pub information: SparseSym,
    pub information_vector: DVector<f64>,
    pub sqrt_factor: SquareRootFactor,
}

impl BeliefState {
    /// ln det Λ of this belief.
    pub fn log_det_information(&self) -> f64 {
        self.sqrt_factor.log_det()
    }

    /// Marginal covariance block of `keys` (dense recovery via the factor).
    pub fn marginal_block(&self, keys: &[VariableKey]) -> Result<DMatrix<f64>> {
        let idx = self.layout.scalar_indices(keys)?;
        let slab = self.sqrt_factor.covariance_columns(&idx);
        let mut out = DMatrix::zeros(idx.len(), idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..idx.len() {
                out[(r, c)] = slab[(i, c)];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_ranges_are_contiguous_and_disjoint() {
        let layout = StateLayout::new([
            VariableKey::pose(0),
            VariableKey::landmark(0),
            VariableKey::pose(1),
        ]);
        assert_eq!(layout.dim(), 8);
        assert_eq!(layout.range_of(VariableKey::pose(0)).unwrap(), 0..3);
        assert_eq!(layout.range_of(VariableKey::landmark(0)).unwrap(), 3..5);
        assert_eq!(layout.range_of(VariableKey::pose(1)).unwrap(), 5..8);
        assert_eq!(layout.key_at(4), VariableKey::landmark(0));
        assert_eq!(layout.key_at(5), VariableKey::pose(1));
    }

    #[test]
    fn extended_layout_appends_new_vars() {
        let layout = StateLayout::new([VariableKey::pose(0)]);
        let ext = layout.extended(&[VariableKey::landmark(3)]);
        assert_eq!(ext.dim(), 5);
        assert!(ext.contains(VariableKey::landmark(3)));
        assert!(!layout.contains(VariableKey::landmark(3)));
    }

    #[test]
    fn wrap_angle_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
