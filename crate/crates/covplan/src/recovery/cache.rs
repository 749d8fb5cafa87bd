use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::belief::{BeliefState, StateLayout, VariableKey};
use crate::error::{Error, Result};

use super::change::{ChangeData, InferenceChange};
use super::kernels::{self, CrossMethod, PriorBlocks, UpdateWorkspace};

/// What a consumer wants from a belief: covariance blocks of `targets`,
/// optionally conditioned on a disjoint variable set.
#[derive(Debug, Clone, Default)]
pub struct CovarianceRequest {
    pub targets: Vec<VariableKey>,
    pub conditioning: Vec<VariableKey>,
}

impl CovarianceRequest {
    pub fn marginal(targets: Vec<VariableKey>) -> Self {
        Self {
            targets,
            conditioning: Vec::new(),
        }
    }

    pub fn conditional(targets: Vec<VariableKey>, conditioning: Vec<VariableKey>) -> Self {
        let out = Self {
            targets,
            conditioning,
        };
        debug_assert!(
            out.targets.iter().all(|t| !out.conditioning.contains(t)),
            "targets and conditioning set must be disjoint"
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheMode {
    Marginal,
    /// Blocks are covariances of the distribution conditioned on these
    /// variables (held fixed, disjoint from the tracked set).
    ConditionalOn(Vec<VariableKey>),
}

/// Tracked covariance blocks Σ^{M,W} (or Σ^{W|F}) over a declared variable
/// set, updated in place of a full posterior inversion by the lemma kernels.
#[derive(Debug, Clone)]
pub struct CovarianceCache {
    vars: Vec<VariableKey>,
    offsets: Vec<usize>,
    slots: HashMap<VariableKey, usize>,
    sigma: DMatrix<f64>,
    mode: CacheMode,
}

impl CovarianceCache {
    pub fn new(vars: Vec<VariableKey>, sigma: DMatrix<f64>, mode: CacheMode) -> Self {
        let dim = StateLayout::dim_of(&vars);
        assert_eq!(sigma.nrows(), dim);
        assert_eq!(sigma.ncols(), dim);
        let mut offsets = Vec::with_capacity(vars.len());
        let mut slots = HashMap::new();
        let mut off = 0;
        for (s, &k) in vars.iter().enumerate() {
            offsets.push(off);
            off += k.dim();
            assert!(slots.insert(k, s).is_none(), "duplicate {k:?} in cache");
        }
        Self {
            vars,
            offsets,
            slots,
            sigma,
            mode,
        }
    }

    /// Marginal blocks of `vars` pulled from a belief's square-root factor.
    pub fn from_belief(belief: &BeliefState, vars: Vec<VariableKey>) -> Result<Self> {
        let sigma = belief.marginal_block(&vars)?;
        Ok(Self::new(vars, sigma, CacheMode::Marginal))
    }

    /// Conditional blocks of `vars` given `conditioning`, via the Schur
    /// complement over the joint marginal of both sets.
    pub fn from_belief_conditional(
        belief: &BeliefState,
        vars: Vec<VariableKey>,
        conditioning: Vec<VariableKey>,
    ) -> Result<Self> {
        if conditioning.is_empty() {
            let sigma = belief.marginal_block(&vars)?;
            return Ok(Self::new(vars, sigma, CacheMode::ConditionalOn(conditioning)));
        }
        let joint_vars: Vec<VariableKey> = vars
            .iter()
            .chain(conditioning.iter())
            .copied()
            .collect();
        let joint = belief.marginal_block(&joint_vars)?;
        let nv = StateLayout::dim_of(&vars);
        let nf = StateLayout::dim_of(&conditioning);
        let vv = joint.view((0, 0), (nv, nv)).into_owned();
        let vf = joint.view((0, nv), (nv, nf)).into_owned();
        let ff = joint.view((nv, nv), (nf, nf)).into_owned();
        let ff_chol = ff.cholesky().ok_or(Error::NotPositiveDefinite { index: 0 })?;
        let sigma = vv - &vf * ff_chol.solve(&vf.transpose());
        Ok(Self::new(
            vars,
            crate::linalg::dense::symmetrize(&sigma),
            CacheMode::ConditionalOn(conditioning),
        ))
    }

    pub fn mode(&self) -> &CacheMode {
        &self.mode
    }

    pub fn vars(&self) -> &[VariableKey] {
        &self.vars
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn contains(&self, key: VariableKey) -> bool {
        self.slots.contains_key(&key)
    }

    fn scalar_indices(&self, keys: &[VariableKey]) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(StateLayout::dim_of(keys));
        for &k in keys {
            let slot = *self.slots.get(&k).ok_or(Error::MissingCacheBlock(k))?;
            let off = self.offsets[slot];
            idx.extend(off..off + k.dim());
        }
        Ok(idx)
    }

    /// Rectangular block with rows over `row_keys` and columns over
    /// `col_keys`; the sets may overlap.
    pub fn block(&self, row_keys: &[VariableKey], col_keys: &[VariableKey]) -> Result<DMatrix<f64>> {
        let ri = self.scalar_indices(row_keys)?;
        let ci = self.scalar_indices(col_keys)?;
        let mut out = DMatrix::zeros(ri.len(), ci.len());
        for (r, &i) in ri.iter().enumerate() {
            for (c, &j) in ci.iter().enumerate() {
                out[(r, c)] = self.sigma[(i, j)];
            }
        }
        Ok(out)
    }

    /// Marginal (or conditional) block of a single variable.
    pub fn marginal(&self, key: VariableKey) -> Result<DMatrix<f64>> {
        self.block(&[key], &[key])
    }

    /// Cache restricted to a subset of its variables.
    pub fn restricted(&self, keys: &[VariableKey]) -> Result<Self> {
        let sigma = self.block(keys, keys)?;
        Ok(Self::new(keys.to_vec(), sigma, self.mode.clone()))
    }

    fn prior_blocks(&self, involved: &[VariableKey]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let cross = self.block(&self.vars.clone(), involved)?;
        let inv = self.block(involved, involved)?;
        Ok((cross, inv))
    }

    /// Applies one inference change, producing the posterior cache over the
    /// tracked variables plus any new ones. In conditional mode the change is
    /// first restricted to unconditioned columns.
    pub fn updated(&self, change: &InferenceChange) -> Result<(Self, UpdateWorkspace)> {
        let change = match &self.mode {
            CacheMode::Marginal => change.clone(),
            CacheMode::ConditionalOn(f) => change.restricted_to_unconditioned(f),
        };
        for &k in &change.involved {
            if !self.contains(k) {
                return Err(Error::MissingCacheBlock(k));
            }
        }
        let (cross, inv) = self.prior_blocks(&change.involved)?;
        let prior = PriorBlocks {
            target: &self.sigma,
            cross: &cross,
            involved: &inv,
        };
        match &change.data {
            ChangeData::NotAugmented { block } => {
                let (post, ws) = kernels::not_augmented(prior, block, None)?;
                Ok((Self::new(self.vars.clone(), post, self.mode.clone()), ws))
            }
            ChangeData::Relinearization {
                block_before,
                block_after,
            } => {
                let (post, ws) = kernels::relinearized(prior, block_before, block_after)?;
                Ok((Self::new(self.vars.clone(), post, self.mode.clone()), ws))
            }
            ChangeData::Rectangular {
                old_block,
                new_block,
                new_vars,
            } => {
                let (out, ws) =
                    kernels::rectangular(prior, old_block, new_block, None, CrossMethod::Two)?;
                Ok((self.assemble_augmented(new_vars, out)?, ws))
            }
            ChangeData::Squared {
                old_block,
                new_block,
                new_vars,
            } => {
                let (out, ws) = kernels::squared(prior, old_block, new_block)?;
                Ok((self.assemble_augmented(new_vars, out)?, ws))
            }
        }
    }

    fn assemble_augmented(
        &self,
        new_vars: &[VariableKey],
        out: kernels::AugmentedOutput,
    ) -> Result<Self> {
        let n_old = self.sigma.nrows();
        let n_new = StateLayout::dim_of(new_vars);
        let mut sigma = DMatrix::zeros(n_old + n_new, n_old + n_new);
        sigma.view_mut((0, 0), (n_old, n_old)).copy_from(&out.old);
        sigma
            .view_mut((0, n_old), (n_old, n_new))
            .copy_from(&out.cross);
        sigma
            .view_mut((n_old, 0), (n_new, n_old))
            .copy_from(&out.cross.transpose());
        sigma
            .view_mut((n_old, n_old), (n_new, n_new))
            .copy_from(&out.new);
        let vars: Vec<VariableKey> = self
            .vars
            .iter()
            .chain(new_vars.iter())
            .copied()
            .collect();
        Ok(Self::new(vars, sigma, self.mode.clone()))
    }
}

/// Lemma-1 update: new factors over existing variables only.
pub fn update_not_augmented(
    cache: &CovarianceCache,
    change: &InferenceChange,
) -> Result<(CovarianceCache, UpdateWorkspace)> {
    debug_assert!(matches!(change.data, ChangeData::NotAugmented { .. }));
    cache.updated(change)
}

/// Lemma-2 update with an explicit cross-block method selection.
pub fn update_rectangular(
    cache: &CovarianceCache,
    change: &InferenceChange,
    method: CrossMethod,
) -> Result<(CovarianceCache, UpdateWorkspace)> {
    let change = match cache.mode() {
        CacheMode::Marginal => change.clone(),
        CacheMode::ConditionalOn(f) => change.restricted_to_unconditioned(f),
    };
    let ChangeData::Rectangular {
        old_block,
        new_block,
        new_vars,
    } = &change.data
    else {
        return Err(Error::DimensionMismatch {
            context: "update_rectangular expects a rectangular change",
            expected: 0,
            actual: 0,
        });
    };
    let (cross, inv) = cache.prior_blocks(&change.involved)?;
    let prior = PriorBlocks {
        target: &cache.sigma,
        cross: &cross,
        involved: &inv,
    };
    let (out, ws) = kernels::rectangular(prior, old_block, new_block, None, method)?;
    Ok((cache.assemble_augmented(new_vars, out)?, ws))
}

/// Lemma-3 update: old-variable blocks are conserved bit-for-bit.
pub fn update_squared(
    cache: &CovarianceCache,
    change: &InferenceChange,
) -> Result<(CovarianceCache, UpdateWorkspace)> {
    debug_assert!(matches!(change.data, ChangeData::Squared { .. }));
    cache.updated(change)
}

/// Lemma-4 update: a factor subset moves to a new linearization point.
pub fn update_relinearized(
    cache: &CovarianceCache,
    change: &InferenceChange,
) -> Result<(CovarianceCache, UpdateWorkspace)> {
    debug_assert!(matches!(change.data, ChangeData::Relinearization { .. }));
    cache.updated(change)
}

/// Conditional-mode update: identical lemma formulas over conditional prior
/// blocks, with the change restricted to unconditioned columns.
pub fn update_conditional(
    cache: &CovarianceCache,
    change: &InferenceChange,
) -> Result<(CovarianceCache, UpdateWorkspace)> {
    debug_assert!(matches!(cache.mode(), CacheMode::ConditionalOn(_)));
    cache.updated(change)
}
