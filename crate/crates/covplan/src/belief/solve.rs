use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, min_degree_ordering, TripletBuilder};
use crate::recovery::{ChangeData, InferenceChange};

use super::jacobian::linearize_factors;
use super::state::{wrap_angle, BeliefState, FactorGraph, StateLayout, VarKind, VariableKey};

/// Gauss-Newton settings plus the per-variable relinearization threshold.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step_tol: f64,
    pub relin_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 25,
            step_tol: 1e-10,
            relin_threshold: 0.05,
        }
    }
}

/// Variables whose linearization point moved beyond the threshold, plus the
/// factors touching them.
#[derive(Debug, Clone, Default)]
pub struct RelinearizationReport {
    pub moved: Vec<VariableKey>,
    pub affected_factors: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub belief: BeliefState,
    pub report: RelinearizationReport,
    pub iterations: usize,
}

/// Batch MAP inference by Gauss-Newton from `initial`.
///
/// The returned belief is linearized at the converged mean. The report lists
/// variables whose total delta from `initial` exceeds the threshold and the
/// factor subset touching them.
pub fn solve_map(
    graph: &FactorGraph,
    initial: &DVector<f64>,
    config: &SolverConfig,
) -> Result<SolveOutput> {
    let layout = &graph.layout;
    if initial.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            context: "solver initial point",
            expected: layout.dim(),
            actual: initial.len(),
        });
    }

    // Variables no factor touches can never be recovered; report them up front.
    let touched: BTreeSet<VariableKey> = graph
        .factors
        .iter()
        .flat_map(|f| f.involved.iter().copied())
        .collect();
    let unconstrained: Vec<VariableKey> = layout
        .keys()
        .iter()
        .copied()
        .filter(|k| !touched.contains(k))
        .collect();
    if !unconstrained.is_empty() {
        return Err(Error::UnderConstrained(unconstrained));
    }

    let mut x = initial.clone();
    let mut ordering: Option<Vec<usize>> = None;
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        iterations += 1;
        let (jac, residual) = linearize_factors(&graph.factors, &x, layout)?;
        let mut triplets = TripletBuilder::new(layout.dim());
        let mut eta = DVector::zeros(layout.dim());
        jac.scatter_normal_eqs(layout, &residual, &mut triplets, &mut eta)?;
        let lambda = triplets.build();
        let ordering = ordering.get_or_insert_with(|| min_degree_ordering(&lambda));
        let factor = cholesky::factorize(&lambda, ordering).map_err(|e| match e {
            Error::NotPositiveDefinite { index } => {
                Error::UnderConstrained(vec![layout.key_at(index)])
            }
            other => other,
        })?;
        let delta = DVector::from_vec(factor.solve(eta.as_slice()));
        retract(layout, &mut x, &delta);
        if delta.norm() < config.step_tol {
            break;
        }
    }

    // Final linearization at the converged point.
    let (jac, residual) = linearize_factors(&graph.factors, &x, layout)?;
    let mut triplets = TripletBuilder::new(layout.dim());
    let mut eta = DVector::zeros(layout.dim());
    jac.scatter_normal_eqs(layout, &residual, &mut triplets, &mut eta)?;
    let lambda = triplets.build();
    let ordering = min_degree_ordering(&lambda);
    let sqrt_factor = cholesky::factorize(&lambda, &ordering).map_err(|e| match e {
        Error::NotPositiveDefinite { index } => Error::UnderConstrained(vec![layout.key_at(index)]),
        other => other,
    })?;
    let information_vector = DVector::from_vec(lambda.mul_vec(x.as_slice()));

    let moved = moved_variables(layout, initial, &x, config.relin_threshold);
    let affected_factors = if moved.is_empty() {
        Vec::new()
    } else {
        graph.factors_touching(&moved)
    };

    Ok(SolveOutput {
        belief: BeliefState {
            layout: layout.clone(),
            mean: x,
            information: lambda,
            information_vector,
            sqrt_factor,
        },
        report: RelinearizationReport {
            moved,
            affected_factors,
        },
        iterations,
    })
}

/// Builds the information-form belief of a graph linearized at `lin_point`,
/// carrying `mean` as the estimate (η = Λ · mean).
pub fn linearize_factors_into_belief(
    graph: &FactorGraph,
    lin_point: &DVector<f64>,
    mean: &DVector<f64>,
) -> Result<BeliefState> {
    let layout = &graph.layout;
    let (jac, residual) = linearize_factors(&graph.factors, lin_point, layout)?;
    let mut triplets = TripletBuilder::new(layout.dim());
    let mut eta = DVector::zeros(layout.dim());
    jac.scatter_normal_eqs(layout, &residual, &mut triplets, &mut eta)?;
    let lambda = triplets.build();
    let ordering = min_degree_ordering(&lambda);
    let sqrt_factor = cholesky::factorize(&lambda, &ordering).map_err(|e| match e {
        Error::NotPositiveDefinite { index } => Error::UnderConstrained(vec![layout.key_at(index)]),
        other => other,
    })?;
    let information_vector = DVector::from_vec(lambda.mul_vec(mean.as_slice()));
    Ok(BeliefState {
        layout: layout.clone(),
        mean: mean.clone(),
        information: lambda,
        information_vector,
        sqrt_factor,
    })
}

/// Applies a Gauss-Newton step with angle wrapping on pose headings.
fn retract(layout: &StateLayout, x: &mut DVector<f64>, delta: &DVector<f64>) {
    *x += delta;
    for &k in layout.keys() {
        if k.kind == VarKind::Pose {
            let r = layout.range_of(k).expect("key belongs to layout");
            x[r.start + 2] = wrap_angle(x[r.start + 2]);
        }
    }
}

/// Per-variable deltas (heading wrapped) above the threshold.
fn moved_variables(
    layout: &StateLayout,
    before: &DVector<f64>,
    after: &DVector<f64>,
    threshold: f64,
) -> Vec<VariableKey> {
    layout
        .keys()
        .iter()
        .copied()
        .filter(|&k| {
            let r = layout.range_of(k).expect("key belongs to layout");
            let mut sq = 0.0;
            for (i, idx) in r.clone().enumerate() {
                let mut d = after[idx] - before[idx];
                if k.kind == VarKind::Pose && i == 2 {
                    d = wrap_angle(d);
                }
                sq += d * d;
            }
            sq.sqrt() > threshold
        })
        .collect()
}

/// Applies one information-form change to a belief, refactorizing the result.
///
/// This is the maximum-likelihood (residual-free) update: the mean is carried
/// over (zero-padded for new variables) and η is recomputed as Λ₊ · mean.
pub fn apply_information_update(
    belief: &BeliefState,
    change: &InferenceChange,
) -> Result<BeliefState> {
    for &k in &change.involved {
        if !belief.layout.contains(k) {
            return Err(Error::UnknownVariable(k));
        }
    }
    if change.rows() == 0 && change.new_vars().is_empty() {
        return Ok(belief.clone());
    }

    let new_vars = change.new_vars().to_vec();
    let layout = belief.layout.extended(&new_vars);
    let n_post = layout.dim();

    let mut triplets = TripletBuilder::new(n_post);
    for j in 0..belief.information.dim() {
        for (i, v) in belief.information.col(j) {
            triplets.add(i, j, v);
        }
    }

    let col_keys: Vec<VariableKey> = change
        .involved
        .iter()
        .copied()
        .chain(new_vars.iter().copied())
        .collect();
    let offsets: Vec<usize> = col_keys
        .iter()
        .map(|&k| layout.offset_of(k))
        .collect::<Result<_>>()?;
    let widths: Vec<usize> = col_keys.iter().map(|k| k.dim()).collect();

    let mut scatter = |a: &DMatrix<f64>, sign: f64| {
        let gram = a.transpose() * a * sign;
        let mut roff = 0;
        for (bi, &wi) in widths.iter().enumerate() {
            let mut coff = 0;
            for (bj, &wj) in widths.iter().enumerate() {
                let block = gram.view((roff, coff), (wi, wj)).into_owned();
                triplets.add_block(offsets[bi], offsets[bj], &block);
                coff += wj;
            }
            roff += wi;
        }
    };

    match &change.data {
        ChangeData::NotAugmented { block } => scatter(block, 1.0),
        ChangeData::Rectangular {
            old_block,
            new_block,
            ..
        }
        | ChangeData::Squared {
            old_block,
            new_block,
            ..
        } => {
            let m = change.rows();
            let mut a = DMatrix::zeros(m, old_block.ncols() + new_block.ncols());
            a.view_mut((0, 0), (m, old_block.ncols())).copy_from(old_block);
            a.view_mut((0, old_block.ncols()), (m, new_block.ncols()))
                .copy_from(new_block);
            scatter(&a, 1.0);
        }
        ChangeData::Relinearization {
            block_before,
            block_after,
        } => {
            scatter(block_before, -1.0);
            scatter(block_after, 1.0);
        }
    }

    let lambda = triplets.build();
    let ordering = min_degree_ordering(&lambda);
    let sqrt_factor = cholesky::factorize(&lambda, &ordering)?;

    let mut mean = DVector::zeros(n_post);
    mean.rows_mut(0, belief.mean.len()).copy_from(&belief.mean);
    let information_vector = DVector::from_vec(lambda.mul_vec(mean.as_slice()));

    Ok(BeliefState {
        layout,
        mean,
        information: lambda,
        information_vector,
        sqrt_factor,
    })
}
