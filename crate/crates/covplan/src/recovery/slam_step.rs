//! Per-step incremental maintenance of all per-variable marginal covariances
//! in a smoothing SLAM estimator.
//!
//! A step bundles two fundamental changes: a squared augmentation (new pose,
//! new landmarks and the factors that constrain them) followed by a stacked
//! not-augmented/relinearized update (re-observations of old landmarks plus
//! any factors that moved linearization point). The one-stage alternative
//! folds everything into a single rectangular update whose removed rows carry
//! a −1 sign.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::belief::{BeliefState, StateLayout, VariableKey};
use crate::error::{Error, Result};
use crate::linalg::dense::symmetrize;
use crate::linalg::SquareRootFactor;

use super::kernels::{self, PriorBlocks, RectangularPieces};

/// One SLAM inference step, already split into its change components. All
/// Jacobian blocks are noise-weighted.
#[derive(Debug, Clone)]
pub struct SlamStep {
    /// Variables introduced this step (new pose first, then new landmarks).
    pub new_vars: Vec<VariableKey>,
    /// Old variables in the squared-stage factors (the previous pose; empty
    /// on the very first step).
    pub squared_involved: Vec<VariableKey>,
    /// Squared-stage columns over `squared_involved`.
    pub squared_old_block: DMatrix<f64>,
    /// Squared-stage columns over `new_vars`; square and invertible.
    pub squared_new_block: DMatrix<f64>,
    /// Variables in the re-observation factors (midpoint frame, so the new
    /// pose may appear here).
    pub reobs_involved: Vec<VariableKey>,
    pub reobs_block: DMatrix<f64>,
    /// Old variables touched by relinearized factors.
    pub relin_involved: Vec<VariableKey>,
    pub relin_before: DMatrix<f64>,
    pub relin_after: DMatrix<f64>,
}

impl SlamStep {
    fn stacked_rows(&self) -> usize {
        self.squared_new_block.nrows() + self.reobs_block.nrows() + 2 * self.relin_before.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStrategy {
    TwoStage,
    OneStage,
}

/// Per-variable marginal covariance blocks for an entire state.
#[derive(Debug, Clone)]
pub struct MarginalTracker {
    layout: StateLayout,
    marginals: std::collections::BTreeMap<VariableKey, DMatrix<f64>>,
}

impl MarginalTracker {
    /// Seeds the tracker from a belief by full backsubstitution.
    pub fn from_belief(belief: &BeliefState) -> Self {
        let sigma = belief.sqrt_factor.covariance_backsubstitution();
        Self::from_full_covariance(&belief.layout, &sigma)
    }

    pub fn from_full_covariance(layout: &StateLayout, sigma: &DMatrix<f64>) -> Self {
        let mut marginals = std::collections::BTreeMap::new();
        for &k in layout.keys() {
            let r = layout.range_of(k).expect("key belongs to layout");
            marginals.insert(k, sigma.view((r.start, r.start), (k.dim(), k.dim())).into_owned());
        }
        Self {
            layout: layout.clone(),
            marginals,
        }
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn marginal(&self, key: VariableKey) -> Result<&DMatrix<f64>> {
        self.marginals.get(&key).ok_or(Error::MissingCacheBlock(key))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableKey, &DMatrix<f64>)> {
        self.marginals.iter()
    }

    /// Largest absolute entry deviation across all shared marginal blocks.
    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        let mut worst = 0.0f64;
        for (k, m) in &self.marginals {
            if let Some(o) = other.marginals.get(k) {
                worst = worst.max((m - o).amax());
            }
        }
        worst
    }
}

/// Updates every tracked marginal through one SLAM step.
///
/// `prior_sqrt` is the square-root factor of the belief before the step and
/// supplies the covariance column fetches. When the step is so large that the
/// incremental path loses its advantage (stacked rows or involved dimension
/// exceeding the prior state dimension) the posterior factor, when given, is
/// used for a full backsubstitution refresh instead; the returned flag
/// reports that fallback.
pub fn slam_step_update(
    tracker: &MarginalTracker,
    step: &SlamStep,
    strategy: StepStrategy,
    prior_sqrt: &SquareRootFactor,
    fallback_posterior: Option<&BeliefState>,
) -> Result<(MarginalTracker, bool)> {
    let n = tracker.layout.dim();
    let xi_union: BTreeSet<VariableKey> = step
        .squared_involved
        .iter()
        .chain(step.relin_involved.iter())
        .chain(
            step.reobs_involved
                .iter()
                .filter(|k| tracker.layout.contains(**k)),
        )
        .copied()
        .collect();
    let xi_dim: usize = xi_union.iter().map(|k| k.dim()).sum();
    if step.stacked_rows() > n || xi_dim > n {
        let posterior = fallback_posterior.ok_or(Error::MethodDisagreement {
            context: "loop-closure fallback requires the posterior belief",
            deviation: 0.0,
            step: 0,
        })?;
        return Ok((MarginalTracker::from_belief(posterior), true));
    }

    let out = match strategy {
        StepStrategy::TwoStage => two_stage(tracker, step, prior_sqrt)?,
        StepStrategy::OneStage => one_stage(tracker, step, prior_sqrt)?,
    };
    Ok((out, false))
}

/// Stacks `block` columns (over `from`) into width `dim(to)` at the positions
/// of `from` inside `to`.
fn pad_columns(
    block: &DMatrix<f64>,
    from: &[VariableKey],
    to: &[VariableKey],
    to_offsets: &std::collections::BTreeMap<VariableKey, usize>,
) -> DMatrix<f64> {
    let width: usize = to.iter().map(|k| k.dim()).sum();
    let mut out = DMatrix::zeros(block.nrows(), width);
    let mut src = 0;
    for k in from {
        let dst = to_offsets[k];
        out.view_mut((0, dst), (block.nrows(), k.dim()))
            .copy_from(&block.view((0, src), (block.nrows(), k.dim())));
        src += k.dim();
    }
    out
}

fn offsets_of(keys: &[VariableKey]) -> std::collections::BTreeMap<VariableKey, usize> {
    let mut map = std::collections::BTreeMap::new();
    let mut off = 0;
    for &k in keys {
        map.insert(k, off);
        off += k.dim();
    }
    map
}

fn two_stage(
    tracker: &MarginalTracker,
    step: &SlamStep,
    prior_sqrt: &SquareRootFactor,
) -> Result<MarginalTracker> {
    let prior_layout = &tracker.layout;
    let mid_layout = prior_layout.extended(&step.new_vars);
    let n = prior_layout.dim();
    let new_dim = StateLayout::dim_of(&step.new_vars);

    // Second-stage involved set in the midpoint frame.
    let xi2: Vec<VariableKey> = step
        .reobs_involved
        .iter()
        .chain(step.relin_involved.iter())
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let xi2_old: Vec<VariableKey> = xi2
        .iter()
        .copied()
        .filter(|k| prior_layout.contains(*k))
        .collect();

    // One column fetch from the prior factor covers both stages.
    let fetch: Vec<VariableKey> = xi2_old
        .iter()
        .chain(step.squared_involved.iter())
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let fetch_idx = prior_layout.scalar_indices(&fetch)?;
    let slab = prior_sqrt.covariance_columns(&fetch_idx); // n × dim(fetch)
    let fetch_offsets = offsets_of(&fetch);
    let slab_cols = |key: VariableKey| -> std::ops::Range<usize> {
        let off = fetch_offsets[&key];
        off..off + key.dim()
    };

    // Stage 1 (squared): new-variable covariance and crosses; old marginals
    // are conserved untouched.
    let xi1 = &step.squared_involved;
    let xi1_dim = StateLayout::dim_of(xi1);
    let (a_iv, new_cov, sig_xi1_cols) = if new_dim > 0 {
        let a_iv = step
            .squared_new_block
            .clone()
            .lu()
            .solve(&DMatrix::identity(new_dim, new_dim))
            .ok_or(Error::RankDeficientNewBlock)?;
        // joint prior block over the squared involved set, from the slab
        let xi1_scalar = prior_layout.scalar_indices(xi1)?;
        let mut sig_i1 = DMatrix::zeros(xi1_dim, xi1_dim);
        let mut cdst = 0;
        for &k in xi1 {
            for (dc, sc) in slab_cols(k).enumerate() {
                for (r, &i) in xi1_scalar.iter().enumerate() {
                    sig_i1[(r, cdst + dc)] = slab[(i, sc)];
                }
            }
            cdst += k.dim();
        }
        let c1 = DMatrix::identity(new_dim, new_dim)
            + &step.squared_old_block * &sig_i1 * step.squared_old_block.transpose();
        let new_cov = symmetrize(&(&a_iv * c1 * a_iv.transpose()));
        // Σ_{k−1}^(:, X^I₁) columns, n × dim(X^I₁)
        let mut cols = DMatrix::zeros(n, xi1_dim);
        let mut off = 0;
        for &k in xi1 {
            cols.view_mut((0, off), (n, k.dim()))
                .copy_from(&slab.columns(slab_cols(k).start, k.dim()));
            off += k.dim();
        }
        (a_iv, new_cov, cols)
    } else {
        (
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, 0),
            DMatrix::zeros(n, 0),
        )
    };

    let mut marginals = tracker.marginals.clone();
    for (vi, &v) in step.new_vars.iter().enumerate() {
        let off: usize = step.new_vars[..vi].iter().map(|k| k.dim()).sum();
        marginals.insert(v, new_cov.view((off, off), (v.dim(), v.dim())).into_owned());
    }

    if xi2.is_empty() {
        return Ok(MarginalTracker {
            layout: mid_layout,
            marginals,
        });
    }

    // Midpoint covariance columns over X^I₂ (all state rows).
    let n_mid = mid_layout.dim();
    let xi2_dim = StateLayout::dim_of(&xi2);
    let xi2_offsets = offsets_of(&xi2);
    let mut mid_cols = DMatrix::zeros(n_mid, xi2_dim);
    // cross of all new variables with the old state: −A_iv A^I Σ^(X^I₁,:)
    let cross_new_old = if new_dim > 0 && xi1_dim > 0 {
        -(&a_iv * &step.squared_old_block * sig_xi1_cols.transpose()) // new_dim × n
    } else {
        DMatrix::zeros(new_dim, n)
    };
    for &key in &xi2 {
        let dst = xi2_offsets[&key];
        if let Ok(r) = prior_layout.range_of(key) {
            // old column: prior rows unchanged, new rows from the stage-1 cross
            mid_cols
                .view_mut((0, dst), (n, key.dim()))
                .copy_from(&slab.columns(slab_cols(key).start, key.dim()));
            for d in 0..key.dim() {
                for nr in 0..new_dim {
                    mid_cols[(n + nr, dst + d)] = cross_new_old[(nr, r.start + d)];
                }
            }
        } else {
            // new column: old rows from the cross, new rows from stage 1
            let nr = mid_layout.range_of(key)?;
            let new_off = nr.start - n;
            for d in 0..key.dim() {
                for row in 0..n {
                    mid_cols[(row, dst + d)] = cross_new_old[(new_off + d, row)];
                }
                for row2 in 0..new_dim {
                    mid_cols[(n + row2, dst + d)] = new_cov[(row2, new_off + d)];
                }
            }
        }
    }

    // Stage 2: stacked removal/addition halves applied to every marginal.
    let inv_idx = mid_layout.scalar_indices(&xi2)?;
    let mut inv_block = DMatrix::zeros(xi2_dim, xi2_dim);
    for (r, &i) in inv_idx.iter().enumerate() {
        for c in 0..xi2_dim {
            inv_block[(r, c)] = mid_cols[(i, c)];
        }
    }
    let inv_block = symmetrize(&inv_block);

    let a_before = pad_columns(&step.relin_before, &step.relin_involved, &xi2, &xi2_offsets);
    let relin_after = pad_columns(&step.relin_after, &step.relin_involved, &xi2, &xi2_offsets);
    let reobs = pad_columns(&step.reobs_block, &step.reobs_involved, &xi2, &xi2_offsets);
    let m_plus = relin_after.nrows() + reobs.nrows();
    let mut a_after = DMatrix::zeros(m_plus, xi2_dim);
    a_after
        .view_mut((0, 0), (relin_after.nrows(), xi2_dim))
        .copy_from(&relin_after);
    a_after
        .view_mut((relin_after.nrows(), 0), (reobs.nrows(), xi2_dim))
        .copy_from(&reobs);

    let prior_blocks = PriorBlocks {
        target: &inv_block,
        cross: &inv_block,
        involved: &inv_block,
    };
    let (_, ws) = kernels::relinearized(prior_blocks, &a_before, &a_after)?;
    let m2 = ws.addition_half.expect("kernel fills the addition half");
    let m1 = ws.removal_half.expect("kernel fills the removal half");
    let u2 = &mid_cols * &m2; // n_mid × m₊
    let u1 = &mid_cols * &m1; // n_mid × m₋

    for &k in mid_layout.keys() {
        let r = mid_layout.range_of(k)?;
        let block = marginals.get_mut(&k).expect("marginal tracked");
        let u2v = u2.rows(r.start, k.dim());
        let u1v = u1.rows(r.start, k.dim());
        *block = symmetrize(&(&*block - u2v * u2v.transpose() + u1v * u1v.transpose()));
    }

    Ok(MarginalTracker {
        layout: mid_layout,
        marginals,
    })
}

fn one_stage(
    tracker: &MarginalTracker,
    step: &SlamStep,
    prior_sqrt: &SquareRootFactor,
) -> Result<MarginalTracker> {
    let prior_layout = &tracker.layout;
    let post_layout = prior_layout.extended(&step.new_vars);
    let new_dim = StateLayout::dim_of(&step.new_vars);
    let new_offsets = offsets_of(&step.new_vars);

    // Old involved set across all stacked rows.
    let xi: Vec<VariableKey> = step
        .squared_involved
        .iter()
        .chain(step.relin_involved.iter())
        .chain(
            step.reobs_involved
                .iter()
                .filter(|k| prior_layout.contains(**k)),
        )
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let xi_dim = StateLayout::dim_of(&xi);
    let xi_offsets = offsets_of(&xi);

    // Split re-observation columns into old and new partitions.
    let reobs_old_keys: Vec<VariableKey> = step
        .reobs_involved
        .iter()
        .copied()
        .filter(|k| prior_layout.contains(*k))
        .collect();
    let m_o = step.reobs_block.nrows();
    let mut reobs_old = DMatrix::zeros(m_o, StateLayout::dim_of(&reobs_old_keys));
    let mut reobs_new = DMatrix::zeros(m_o, new_dim);
    {
        let old_offsets = offsets_of(&reobs_old_keys);
        let mut src = 0;
        for &k in &step.reobs_involved {
            let cols = step.reobs_block.columns(src, k.dim()).into_owned();
            if prior_layout.contains(k) {
                reobs_old
                    .view_mut((0, old_offsets[&k]), (m_o, k.dim()))
                    .copy_from(&cols);
            } else {
                reobs_new
                    .view_mut((0, new_offsets[&k]), (m_o, k.dim()))
                    .copy_from(&cols);
            }
            src += k.dim();
        }
    }

    // Stacked blocks: squared rows, removed rows (sign −1), added rows, re-obs.
    let m1r = step.squared_new_block.nrows();
    let m_r = step.relin_before.nrows();
    let m = m1r + 2 * m_r + m_o;
    let mut a_old = DMatrix::zeros(m, xi_dim);
    let mut a_new = DMatrix::zeros(m, new_dim);
    let mut signs = vec![1.0f64; m];
    {
        let sq_old = pad_columns(&step.squared_old_block, &step.squared_involved, &xi, &xi_offsets);
        a_old.view_mut((0, 0), (m1r, xi_dim)).copy_from(&sq_old);
        a_new
            .view_mut((0, 0), (m1r, new_dim))
            .copy_from(&step.squared_new_block);
        let before = pad_columns(&step.relin_before, &step.relin_involved, &xi, &xi_offsets);
        a_old.view_mut((m1r, 0), (m_r, xi_dim)).copy_from(&before);
        for s in signs.iter_mut().skip(m1r).take(m_r) {
            *s = -1.0;
        }
        let after = pad_columns(&step.relin_after, &step.relin_involved, &xi, &xi_offsets);
        a_old
            .view_mut((m1r + m_r, 0), (m_r, xi_dim))
            .copy_from(&after);
        let reobs_padded = pad_columns(&reobs_old, &reobs_old_keys, &xi, &xi_offsets);
        a_old
            .view_mut((m1r + 2 * m_r, 0), (m_o, xi_dim))
            .copy_from(&reobs_padded);
        a_new
            .view_mut((m1r + 2 * m_r, 0), (m_o, new_dim))
            .copy_from(&reobs_new);
    }

    // Prior columns over the involved set.
    let xi_scalar = prior_layout.scalar_indices(&xi)?;
    let slab = prior_sqrt.covariance_columns(&xi_scalar); // n × xi_dim
    let mut inv_block = DMatrix::zeros(xi_dim, xi_dim);
    for (r, &i) in xi_scalar.iter().enumerate() {
        for c in 0..xi_dim {
            inv_block[(r, c)] = slab[(i, c)];
        }
    }
    let inv_block = symmetrize(&inv_block);

    let pieces = RectangularPieces::compute(&inv_block, &a_old, &a_new, Some(&signs))?;

    // Old marginals: Σ_v − B_v G⁻¹ B_vᵀ with B = Σ^(:,X^I) K₁ᵀ, vectorized.
    let big_b = &slab * pieces.projected_block.transpose(); // n × m
    let solved = pieces
        .projected_capacitance
        .clone()
        .lu()
        .solve(&big_b.transpose())
        .ok_or(Error::InconsistentDowndate)?; // m × n

    let mut marginals = std::collections::BTreeMap::new();
    for &k in prior_layout.keys() {
        let r = prior_layout.range_of(k)?;
        let prev = tracker.marginals.get(&k).expect("marginal tracked");
        let bv = big_b.rows(r.start, k.dim());
        let xv = solved.columns(r.start, k.dim());
        marginals.insert(k, symmetrize(&(prev - bv * xv)));
    }
    for &k in &step.new_vars {
        let off = new_offsets[&k];
        marginals.insert(
            k,
            pieces
                .new_cov
                .view((off, off), (k.dim(), k.dim()))
                .into_owned(),
        );
    }

    Ok(MarginalTracker {
        layout: post_layout,
        marginals,
    })
}
