//! Deterministic random-instance builders for the oracle suites.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::belief::{BeliefState, StateLayout, VariableKey};
use crate::error::Result;
use crate::linalg::{cholesky, min_degree_ordering, SparseSym};
use crate::ramdl::{ActionIncrement, IncrementFactor, SegmentId};
use crate::recovery::{ChangeKind, InferenceChange};

/// Random pose/landmark layout with scalar dimension close to (and not
/// exceeding) `max_dim`.
pub fn random_layout(rng: &mut ChaCha8Rng, max_dim: usize) -> StateLayout {
    let mut layout = StateLayout::default();
    let mut poses = 0;
    let mut landmarks = 0;
    while layout.dim() + 3 <= max_dim {
        if rng.gen_bool(0.5) {
            layout.push(VariableKey::pose(poses));
            poses += 1;
        } else {
            layout.push(VariableKey::landmark(landmarks));
            landmarks += 1;
        }
    }
    if layout.dim() + 2 <= max_dim {
        layout.push(VariableKey::landmark(landmarks));
    }
    layout
}

/// Well-conditioned random SPD information matrix (eigenvalues ≳ 1).
pub fn random_information(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    (m.transpose() * &m) / (n as f64) + DMatrix::identity(n, n)
}

/// Builds an information-form belief directly from a dense Λ (mean zero).
pub fn belief_from_information(layout: &StateLayout, lambda: &DMatrix<f64>) -> Result<BeliefState> {
    let sparse = SparseSym::from_dense(lambda);
    let ordering = min_degree_ordering(&sparse);
    let factor = cholesky::factorize(&sparse, &ordering)?;
    Ok(BeliefState {
        layout: layout.clone(),
        mean: DVector::zeros(layout.dim()),
        information: sparse,
        information_vector: DVector::zeros(layout.dim()),
        sqrt_factor: factor,
    })
}

/// `count` distinct keys drawn from the layout, in stable order.
pub fn random_subset(rng: &mut ChaCha8Rng, layout: &StateLayout, count: usize) -> Vec<VariableKey> {
    let mut keys: Vec<VariableKey> = layout.keys().to_vec();
    let take = count.min(keys.len());
    // partial Fisher-Yates, then restore layout order for determinism of
    // downstream block layouts
    for i in 0..take {
        let j = rng.gen_range(i..keys.len());
        keys.swap(i, j);
    }
    let mut subset = keys[..take].to_vec();
    subset.sort();
    subset
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Square, comfortably invertible random block.
pub fn random_invertible(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DMatrix<f64> {
    let mut m = random_matrix(rng, dim, dim, scale * 0.4);
    for i in 0..dim {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        m[(i, i)] += sign * (scale + rng.gen::<f64>() * scale);
    }
    m
}

/// Fresh new-variable keys that cannot collide with layout keys.
pub fn fresh_vars(layout: &StateLayout, count: usize, poses: bool) -> Vec<VariableKey> {
    let start = layout
        .keys()
        .iter()
        .map(|k| k.index + 1)
        .max()
        .unwrap_or(0);
    (0..count)
        .map(|i| {
            if poses {
                VariableKey::pose(start + i)
            } else {
                VariableKey::landmark(start + i)
            }
        })
        .collect()
}

/// Random change of the requested kind against a prior described by
/// (`layout`, dense Λ). Relinearization blocks are rescaled until the dense
/// posterior stays positive definite.
pub fn random_change(
    rng: &mut ChaCha8Rng,
    kind: ChangeKind,
    layout: &StateLayout,
    lambda: &DMatrix<f64>,
    max_m: usize,
    max_new: usize,
) -> InferenceChange {
    let n_vars = layout.len();
    let xi_count = rng.gen_range(1..=n_vars.min(4));
    let involved = random_subset(rng, layout, xi_count);
    let xi_dim = StateLayout::dim_of(&involved);

    match kind {
        ChangeKind::NotAugmented => {
            let m = rng.gen_range(1..=max_m.max(1));
            let block = random_matrix(rng, m, xi_dim, 1.0);
            InferenceChange::not_augmented(involved, block).expect("generated dims consistent")
        }
        ChangeKind::Squared => {
            let new_count = rng.gen_range(1..=max_new.max(1).min(4));
            let new_vars = fresh_vars(layout, new_count, rng.gen_bool(0.5));
            let new_dim = StateLayout::dim_of(&new_vars);
            let old_block = random_matrix(rng, new_dim, xi_dim, 0.8);
            let new_block = random_invertible(rng, new_dim, 1.0);
            InferenceChange::squared(involved, old_block, new_vars, new_block)
                .expect("generated dims consistent")
        }
        ChangeKind::Rectangular => {
            let new_count = rng.gen_range(1..=max_new.max(1).min(4));
            let new_vars = fresh_vars(layout, new_count, rng.gen_bool(0.5));
            let new_dim = StateLayout::dim_of(&new_vars);
            let m = rng.gen_range(new_dim + 1..=(new_dim + max_m).max(new_dim + 2));
            let old_block = random_matrix(rng, m, xi_dim, 0.8);
            let mut new_block = random_matrix(rng, m, new_dim, 0.5);
            // anchor full column rank
            for c in 0..new_dim {
                new_block[(c, c)] += 1.5;
            }
            InferenceChange::rectangular(involved, old_block, new_vars, new_block)
                .expect("generated dims consistent")
        }
        ChangeKind::Relinearization => {
            let m = rng.gen_range(1..=max_m.max(1));
            let mut before = random_matrix(rng, m, xi_dim, 0.6);
            let after = random_matrix(rng, m, xi_dim, 0.6);
            // keep the downdated information positive definite
            loop {
                let change =
                    InferenceChange::relinearization(involved.clone(), before.clone(), after.clone())
                        .expect("generated dims consistent");
                let (_, post) = super::oracle::posterior_information(layout, lambda, &change);
                if post.clone().cholesky().is_some() {
                    return change;
                }
                before *= 0.5;
            }
        }
    }
}

/// Random action increment introducing fresh variables, each constrained by
/// an invertible block, optionally with extra rows over old variables.
pub fn random_increment(
    rng: &mut ChaCha8Rng,
    segment: SegmentId,
    id: usize,
    available_old: &[VariableKey],
    next_pose_index: &mut usize,
    rectangular: bool,
) -> ActionIncrement {
    let new_count = rng.gen_range(1..=2);
    let new_vars: Vec<VariableKey> = (0..new_count)
        .map(|_| {
            let k = VariableKey::pose(*next_pose_index);
            *next_pose_index += 1;
            k
        })
        .collect();

    let mut factors = Vec::new();
    let mut prev: Option<VariableKey> = None;
    for &nv in &new_vars {
        // chain each new variable to an anchor (old var or previous new one)
        let anchor = prev.unwrap_or_else(|| {
            available_old[rng.gen_range(0..available_old.len())]
        });
        let rows = nv.dim();
        factors.push(IncrementFactor {
            involved: vec![anchor, nv],
            blocks: vec![
                random_matrix(rng, rows, anchor.dim(), 0.6),
                random_invertible(rng, rows, 1.0),
            ],
        });
        prev = Some(nv);
    }
    if rectangular {
        // observation-style rows tying a new variable to an old one
        let extra = rng.gen_range(1..=2);
        for _ in 0..extra {
            let old = available_old[rng.gen_range(0..available_old.len())];
            let nv = new_vars[rng.gen_range(0..new_vars.len())];
            let rows = rng.gen_range(1..=2);
            factors.push(IncrementFactor {
                involved: vec![old, nv],
                blocks: vec![
                    random_matrix(rng, rows, old.dim(), 0.7),
                    random_matrix(rng, rows, nv.dim(), 0.7),
                ],
            });
        }
    }
    ActionIncrement {
        id,
        segment,
        new_vars,
        factors,
    }
}
