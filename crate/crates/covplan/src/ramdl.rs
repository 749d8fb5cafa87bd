//! Information-theoretic objective evaluation from prior covariance blocks.
//!
//! Scores are computed from the small capacitance matrices of the involved
//! variables only, so evaluating a candidate costs nothing that scales with
//! the state dimension once the shared prior blocks exist.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::belief::{BeliefState, StateLayout, VariableKey};
use crate::error::{Error, Result};
use crate::linalg::dense::spd_log_det;
use crate::recovery::{CovarianceCache, InferenceChange};

/// Which uncertainty functional a score value carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    UnfocusedGain,
    FocusedGain,
    FocusedEntropy,
}

/// A scored objective value in nats (dimension constant dropped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoScore {
    pub value: f64,
    pub kind: ScoreKind,
}

impl InfoScore {
    /// Larger-is-better reading: gains maximize, entropies minimize.
    pub fn utility(&self) -> f64 {
        match self.kind {
            ScoreKind::UnfocusedGain | ScoreKind::FocusedGain => self.value,
            ScoreKind::FocusedEntropy => -self.value,
        }
    }
}

/// Focused-query declaration: the focus set and whether it consists of old
/// variables (gain) or newly introduced ones (posterior entropy).
#[derive(Debug, Clone)]
pub struct FocusedQuery {
    pub focus: Vec<VariableKey>,
    pub mode: FocusMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FocusMode {
    OldVariablesGain,
    NewVariablesEntropy,
}

/// Planner-level objective selector.
#[derive(Debug, Clone)]
pub enum InfoObjective {
    /// Information gain of the entire state.
    Unfocused,
    /// Information gain of a fixed set of existing variables.
    FocusedOldGain(Vec<VariableKey>),
    /// Posterior entropy of each candidate's terminal new variable.
    FocusedNewEntropy,
}

/// Identity of a trajectory segment for prefix sharing: two increments are
/// the same sub-action iff their segment ids match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentId(pub u64);

/// One factor of an action increment: involved variables and their
/// noise-weighted Jacobian blocks, realized under the maximum-likelihood
/// assumption (zero predicted residual).
#[derive(Debug, Clone)]
pub struct IncrementFactor {
    pub involved: Vec<VariableKey>,
    pub blocks: Vec<DMatrix<f64>>,
}

impl IncrementFactor {
    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }
}

/// The factors and new variables one action (or sub-action) introduces.
#[derive(Debug, Clone)]
pub struct ActionIncrement {
    pub id: usize,
    pub segment: SegmentId,
    pub new_vars: Vec<VariableKey>,
    pub factors: Vec<IncrementFactor>,
}

impl ActionIncrement {
    pub fn rows(&self) -> usize {
        self.factors.iter().map(|f| f.dim()).sum()
    }

    /// Old (involved) variables with respect to a membership test for the
    /// base state the increment is applied to.
    pub fn involved_old(&self, is_old: &dyn Fn(VariableKey) -> bool) -> Vec<VariableKey> {
        let mut set = BTreeSet::new();
        for f in &self.factors {
            for &k in &f.involved {
                if is_old(k) {
                    set.insert(k);
                } else {
                    debug_assert!(
                        self.new_vars.contains(&k),
                        "{k:?} neither old nor introduced by this increment"
                    );
                }
            }
        }
        set.into_iter().collect()
    }

    /// Realizes the increment as an inference change against a base state,
    /// classifying it by the relation between factor and new dimensions.
    pub fn to_change(&self, is_old: &dyn Fn(VariableKey) -> bool) -> Result<InferenceChange> {
        let involved = self.involved_old(is_old);
        let m = self.rows();
        let old_dim = StateLayout::dim_of(&involved);
        let new_dim = StateLayout::dim_of(&self.new_vars);

        let mut old_offsets = std::collections::BTreeMap::new();
        let mut off = 0;
        for &k in &involved {
            old_offsets.insert(k, off);
            off += k.dim();
        }
        let mut new_offsets = std::collections::BTreeMap::new();
        let mut off = 0;
        for &k in &self.new_vars {
            new_offsets.insert(k, off);
            off += k.dim();
        }

        let mut old_block = DMatrix::zeros(m, old_dim);
        let mut new_block = DMatrix::zeros(m, new_dim);
        let mut row = 0;
        for f in &self.factors {
            let d = f.dim();
            for (k, b) in f.involved.iter().zip(&f.blocks) {
                if let Some(&c) = old_offsets.get(k) {
                    old_block.view_mut((row, c), (d, k.dim())).copy_from(b);
                } else {
                    let c = new_offsets[k];
                    new_block.view_mut((row, c), (d, k.dim())).copy_from(b);
                }
            }
            row += d;
        }

        if self.new_vars.is_empty() {
            InferenceChange::not_augmented(involved, old_block)
        } else if m == new_dim {
            InferenceChange::squared(involved, old_block, self.new_vars.clone(), new_block)
        } else {
            InferenceChange::rectangular(involved, old_block, self.new_vars.clone(), new_block)
        }
    }
}

/// Concatenates a candidate's segment increments into one flat increment.
pub fn concat_increments(id: usize, segments: &[ActionIncrement]) -> ActionIncrement {
    let mut new_vars = Vec::new();
    let mut factors = Vec::new();
    for s in segments {
        new_vars.extend(s.new_vars.iter().copied());
        factors.extend(s.factors.iter().cloned());
    }
    ActionIncrement {
        id,
        segment: SegmentId(u64::MAX),
        new_vars,
        factors,
    }
}

/// ½ ln |I_m + A Σ Aᵀ| — the unfocused gain of a change without new
/// variables (the capacitance log-determinant).
pub fn ig_unfocused(a_inv: &DMatrix<f64>, sigma_involved: &DMatrix<f64>) -> Result<InfoScore> {
    let m = a_inv.nrows();
    if sigma_involved.nrows() != a_inv.ncols() {
        return Err(Error::DimensionMismatch {
            context: "unfocused gain blocks",
            expected: a_inv.ncols(),
            actual: sigma_involved.nrows(),
        });
    }
    let c = DMatrix::identity(m, m) + a_inv * sigma_involved * a_inv.transpose();
    Ok(InfoScore {
        value: 0.5 * spd_log_det(&c)?,
        kind: ScoreKind::UnfocusedGain,
    })
}

/// Unfocused gain of a general quadratic change: ½ ln|C| for pure addition,
/// plus ½ ln|A_newᵀ C⁻¹ A_new| when the state is augmented (so that summing
/// per-segment gains telescopes the posterior log-determinant).
pub fn ig_unfocused_change(
    change: &InferenceChange,
    sigma_involved: &DMatrix<f64>,
) -> Result<InfoScore> {
    use crate::recovery::ChangeData;
    let (a_old, a_new) = match &change.data {
        ChangeData::NotAugmented { block } => (block, None),
        ChangeData::Rectangular {
            old_block,
            new_block,
            ..
        }
        | ChangeData::Squared {
            old_block,
            new_block,
            ..
        } => (old_block, Some(new_block)),
        ChangeData::Relinearization { .. } => {
            return Err(Error::DimensionMismatch {
                context: "gain of a relinearization change is undefined",
                expected: 0,
                actual: 0,
            })
        }
    };
    let m = a_old.nrows();
    let c = DMatrix::identity(m, m) + a_old * sigma_involved * a_old.transpose();
    let mut value = 0.5 * spd_log_det(&c)?;
    if let Some(a_new) = a_new {
        let solved = c
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { index: 0 })?
            .solve(a_new);
        let small = a_new.transpose() * solved;
        value += 0.5 * spd_log_det(&small)?;
    }
    Ok(InfoScore {
        value,
        kind: ScoreKind::UnfocusedGain,
    })
}

/// Focused gain of old variables X^F: the unfocused term minus the same
/// functional evaluated in the conditional-on-X^F space.
///
/// `a_unfocused` and `sigma_cond` cover the involved variables outside the
/// focus set; `a_new` extends the formula to state-augmenting changes.
pub fn ig_focused_old(
    a_inv: &DMatrix<f64>,
    a_unfocused: &DMatrix<f64>,
    sigma_involved: &DMatrix<f64>,
    sigma_cond_unfocused: &DMatrix<f64>,
    a_new: Option<&DMatrix<f64>>,
) -> Result<InfoScore> {
    if a_unfocused.ncols() != sigma_cond_unfocused.nrows() {
        return Err(Error::DimensionMismatch {
            context: "focused gain conditional blocks",
            expected: a_unfocused.ncols(),
            actual: sigma_cond_unfocused.nrows(),
        });
    }
    let m = a_inv.nrows();
    let total = {
        let c = DMatrix::identity(m, m) + a_inv * sigma_involved * a_inv.transpose();
        let mut v = 0.5 * spd_log_det(&c)?;
        if let Some(an) = a_new {
            let solved = c
                .cholesky()
                .ok_or(Error::NotPositiveDefinite { index: 0 })?
                .solve(an);
            v += 0.5 * spd_log_det(&(an.transpose() * solved))?;
        }
        v
    };
    let unfocused_part = {
        let c = DMatrix::identity(m, m)
            + a_unfocused * sigma_cond_unfocused * a_unfocused.transpose();
        let mut v = 0.5 * spd_log_det(&c)?;
        if let Some(an) = a_new {
            let solved = c
                .cholesky()
                .ok_or(Error::NotPositiveDefinite { index: 0 })?
                .solve(an);
            v += 0.5 * spd_log_det(&(an.transpose() * solved))?;
        }
        v
    };
    Ok(InfoScore {
        value: total - unfocused_part,
        kind: ScoreKind::FocusedGain,
    })
}

/// Posterior entropy term ½ ln |Σ₊^{M,F}| of focused new variables, computed
/// through the rectangular update's new-block covariance.
pub fn entropy_focused_new(
    change: &InferenceChange,
    prior_cache: &CovarianceCache,
    focus: &[VariableKey],
) -> Result<InfoScore> {
    for k in focus {
        if !change.new_vars().contains(k) {
            return Err(Error::UnknownVariable(*k));
        }
    }
    let (post, _) = prior_cache.updated(change)?;
    let block = post.block(focus, focus)?;
    Ok(InfoScore {
        value: 0.5 * spd_log_det(&block)?,
        kind: ScoreKind::FocusedEntropy,
    })
}

/// Scores one change against tail caches under the given objective.
pub fn score_change(
    change: &InferenceChange,
    cache: &CovarianceCache,
    cond_cache: Option<&CovarianceCache>,
    objective: &InfoObjective,
    terminal_focus: &[VariableKey],
) -> Result<InfoScore> {
    match objective {
        InfoObjective::Unfocused => {
            let sigma = cache.block(&change.involved, &change.involved)?;
            ig_unfocused_change(change, &sigma)
        }
        InfoObjective::FocusedOldGain(focus) => {
            let cond = cond_cache.ok_or(Error::MissingCacheBlock(
                *focus.first().expect("focus set must not be empty"),
            ))?;
            let sigma = cache.block(&change.involved, &change.involved)?;
            let unfocused_vars: Vec<VariableKey> = change
                .involved
                .iter()
                .copied()
                .filter(|k| !focus.contains(k))
                .collect();
            let restricted = change.restricted_to_unconditioned(focus);
            let a_unf = match &restricted.data {
                crate::recovery::ChangeData::NotAugmented { block } => block.clone(),
                crate::recovery::ChangeData::Rectangular { old_block, .. }
                | crate::recovery::ChangeData::Squared { old_block, .. } => old_block.clone(),
                crate::recovery::ChangeData::Relinearization { .. } => unreachable!(),
            };
            let sigma_cond = cond.block(&unfocused_vars, &unfocused_vars)?;
            let a_inv = match &change.data {
                crate::recovery::ChangeData::NotAugmented { block } => block.clone(),
                crate::recovery::ChangeData::Rectangular { old_block, .. }
                | crate::recovery::ChangeData::Squared { old_block, .. } => old_block.clone(),
                crate::recovery::ChangeData::Relinearization { .. } => unreachable!(),
            };
            let a_new = match &change.data {
                crate::recovery::ChangeData::Rectangular { new_block, .. }
                | crate::recovery::ChangeData::Squared { new_block, .. } => Some(new_block),
                _ => None,
            };
            ig_focused_old(&a_inv, &a_unf, &sigma, &sigma_cond, a_new)
        }
        InfoObjective::FocusedNewEntropy => entropy_focused_new(change, cache, terminal_focus),
    }
}

/// Result of scoring a candidate set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// (candidate id, score), in input order.
    pub scores: Vec<(usize, InfoScore)>,
    /// Winning candidate id (max utility, ties to the lowest id).
    pub best: usize,
}

pub(crate) fn select_best(scores: &[(usize, InfoScore)]) -> usize {
    let mut best = None::<(usize, f64)>;
    for (id, s) in scores {
        let u = s.utility();
        let better = match best {
            None => true,
            Some((bid, bu)) => u > bu || (u == bu && *id < bid),
        };
        if better {
            best = Some((*id, u));
        }
    }
    best.expect("at least one candidate").0
}

/// Evaluates flat candidate increments: one shared prior-block computation,
/// then per-candidate scoring independent of the state dimension.
pub fn evaluate_candidates_flat(
    candidates: &[ActionIncrement],
    belief: &BeliefState,
    objective: &InfoObjective,
) -> Result<Evaluation> {
    let is_old = |k: VariableKey| belief.layout.contains(k);
    let mut all: BTreeSet<VariableKey> = BTreeSet::new();
    for c in candidates {
        all.extend(c.involved_old(&is_old));
    }
    let all: Vec<VariableKey> = all.into_iter().collect();
    let cache = CovarianceCache::from_belief(belief, all.clone())?;
    let cond_cache = match objective {
        InfoObjective::FocusedOldGain(focus) => {
            let unfocused: Vec<VariableKey> = all
                .iter()
                .copied()
                .filter(|k| !focus.contains(k))
                .collect();
            Some(CovarianceCache::from_belief_conditional(
                belief,
                unfocused,
                focus.clone(),
            )?)
        }
        _ => None,
    };

    let mut scores = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let change = cand.to_change(&is_old)?;
        let terminal: Vec<VariableKey> = cand.new_vars.last().copied().into_iter().collect();
        let score = score_change(&change, &cache, cond_cache.as_ref(), objective, &terminal)?;
        scores.push((cand.id, score));
    }
    let best = select_best(&scores);
    Ok(Evaluation { scores, best })
}
