use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::belief::{StateLayout, VariableKey};
use crate::fgp::{self, CandidatePath};
use crate::linalg::dense::rel_frobenius;
use crate::ramdl::{self, ActionIncrement, InfoObjective, InfoScore, ScoreKind, SegmentId};
use crate::recovery::kernels::mutation::Mutation;
use crate::recovery::{
    slam_step_update, CacheMode, ChangeKind, CovarianceCache, InferenceChange, MarginalTracker,
    SlamStep, StepStrategy,
};

use super::{gen, oracle};

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Number of random cases per suite.
    pub seeds: u64,
    /// Upper bound on the prior state dimension.
    pub max_n: usize,
    pub threads: usize,
    /// Optional fault injection (the suite is expected to fail with it).
    pub mutate: Option<Mutation>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: 100,
            max_n: 200,
            threads: std::thread::available_parallelism()
                .map(|p| p.get())
                .unwrap_or(1),
            mutate: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub tolerance: f64,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn line(&self) -> String {
        format!(
            "{:<28} {:>5} cases  worst {:>10.3e}  tol {:>8.1e}  {}",
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

struct CaseOutput {
    err: f64,
    failure: Option<String>,
}

fn ok(err: f64) -> CaseOutput {
    CaseOutput { err, failure: None }
}

fn fail(err: f64, msg: String) -> CaseOutput {
    CaseOutput {
        err,
        failure: Some(msg),
    }
}

/// Runs `case` over `seeds` cases sharded across threads; failure messages
/// are ordered by seed so output is deterministic.
fn run_cases<F>(
    name: &'static str,
    tolerance: f64,
    opts: &VerifyOptions,
    case: F,
) -> SuiteOutcome
where
    F: Fn(u64) -> CaseOutput + Sync,
{
    let seeds: Vec<u64> = (0..opts.seeds).collect();
    let threads = opts.threads.max(1).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(threads);
    let mutate = opts.mutate;
    let mut results: Vec<(u64, CaseOutput)> = Vec::with_capacity(seeds.len());
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for part in seeds.chunks(chunk.max(1)) {
            let case = &case;
            handles.push(scope.spawn(move || {
                crate::recovery::kernels::mutation::set(mutate);
                let out: Vec<(u64, CaseOutput)> =
                    part.iter().map(|&s| (s, case(s))).collect();
                crate::recovery::kernels::mutation::set(None);
                out
            }));
        }
        for h in handles {
            results.extend(h.join().expect("verification worker panicked"));
        }
    });
    results.sort_by_key(|(s, _)| *s);

    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (seed, out) in &results {
        worst = worst.max(out.err);
        if let Some(msg) = &out.failure {
            failures.push(format!("seed {seed}: {msg}"));
        } else if out.err > tolerance {
            failures.push(format!("seed {seed}: error {:.3e} above tolerance", out.err));
        }
    }
    SuiteOutcome {
        name,
        cases: results.len(),
        tolerance,
        worst,
        failures,
    }
}

fn case_rng(suite: u64, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(suite.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed)
}

/// A random prior: layout, dense Λ, dense Σ.
fn random_prior(
    rng: &mut ChaCha8Rng,
    max_n: usize,
) -> (StateLayout, DMatrix<f64>, DMatrix<f64>) {
    let target = rng.gen_range(12..=max_n.max(16));
    let layout = gen::random_layout(rng, target);
    let lambda = gen::random_information(rng, layout.dim());
    let sigma = lambda.clone().try_inverse().expect("SPD prior");
    (layout, lambda, sigma)
}

fn tracked_union(
    rng: &mut ChaCha8Rng,
    layout: &StateLayout,
    change: &InferenceChange,
) -> Vec<VariableKey> {
    let count = rng.gen_range(1..=5);
    let y = gen::random_subset(rng, layout, count);
    let mut set: BTreeSet<VariableKey> = y.into_iter().collect();
    set.extend(change.involved.iter().copied());
    set.into_iter().collect()
}

fn lemma_case(kind: ChangeKind, max_n: usize, suite: u64, seed: u64) -> CaseOutput {
    let mut rng = case_rng(suite, seed);
    let (layout, lambda, sigma) = random_prior(&mut rng, max_n);
    let change = gen::random_change(&mut rng, kind, &layout, &lambda, 30, 3);
    let tracked = tracked_union(&mut rng, &layout, &change);
    let prior_block = oracle::sigma_block(&sigma, &layout, &tracked, &tracked);
    let cache = CovarianceCache::new(tracked.clone(), prior_block.clone(), CacheMode::Marginal);

    let (post, ws) = match cache.updated(&change) {
        Ok(v) => v,
        Err(e) => return fail(f64::INFINITY, format!("update failed: {e}")),
    };

    let (post_layout, lambda_post) = oracle::posterior_information(&layout, &lambda, &change);
    let sigma_post = match lambda_post.try_inverse() {
        Some(s) => s,
        None => return fail(f64::INFINITY, "singular dense posterior".into()),
    };
    let expected = oracle::sigma_block(&sigma_post, &post_layout, post.vars(), post.vars());
    let got = post
        .block(post.vars(), post.vars())
        .expect("cache covers its own vars");
    let mut err = rel_frobenius(&got, &expected);

    // intermediates must not scale with the full state dimension
    let bound = change.rows().max(StateLayout::dim_of(&change.involved))
        + StateLayout::dim_of(change.new_vars())
        + StateLayout::dim_of(&tracked);
    if ws.max_dim() > bound {
        return fail(
            f64::INFINITY,
            format!("workspace dim {} above bound {bound}", ws.max_dim()),
        );
    }

    match kind {
        ChangeKind::Rectangular => {
            // both cross-block routes must agree
            let m1 = crate::recovery::cache::update_rectangular(
                &cache,
                &change,
                crate::recovery::kernels::CrossMethod::One,
            );
            let m2 = crate::recovery::cache::update_rectangular(
                &cache,
                &change,
                crate::recovery::kernels::CrossMethod::Two,
            );
            match (m1, m2) {
                (Ok((c1, _)), Ok((c2, _))) => {
                    let b1 = c1.block(c1.vars(), c1.vars()).expect("self block");
                    let b2 = c2.block(c2.vars(), c2.vars()).expect("self block");
                    let d = (b1 - b2).amax();
                    if d > 1e-10 {
                        return fail(d, format!("cross methods disagree by {d:.3e}"));
                    }
                }
                _ => return fail(f64::INFINITY, "rectangular method failed".into()),
            }
        }
        ChangeKind::Squared => {
            // old-variable blocks must be conserved bit-for-bit
            let old = post.block(&tracked, &tracked).expect("old block");
            if old != prior_block {
                return fail(f64::INFINITY, "squared update modified old blocks".into());
            }
        }
        _ => {}
    }

    // symmetry of the tracked posterior
    let sym = (got.clone() - got.transpose()).amax();
    err = err.max(sym);
    ok(err)
}

fn conditional_case(max_n: usize, suite: u64, seed: u64) -> CaseOutput {
    let mut rng = case_rng(suite, seed);
    let (layout, lambda, _sigma) = random_prior(&mut rng, max_n);
    let kinds = [
        ChangeKind::NotAugmented,
        ChangeKind::Rectangular,
        ChangeKind::Squared,
        ChangeKind::Relinearization,
    ];
    let kind = kinds[(seed % 4) as usize];
    let change = gen::random_change(&mut rng, kind, &layout, &lambda, 12, 2);

    // conditioning set disjoint from the tracked one
    let cond_count = rng.gen_range(1..=4);
    let cond: Vec<VariableKey> = gen::random_subset(&mut rng, &layout, cond_count);
    let tracked: Vec<VariableKey> = tracked_union(&mut rng, &layout, &change)
        .into_iter()
        .filter(|k| !cond.contains(k))
        .collect();
    if tracked.is_empty() {
        return ok(0.0);
    }
    let prior_cond = oracle::conditional_sigma(&lambda, &layout, &tracked, &cond);
    let cache = CovarianceCache::new(
        tracked.clone(),
        prior_cond,
        CacheMode::ConditionalOn(cond.clone()),
    );
    let (post, _) = match crate::recovery::cache::update_conditional(&cache, &change) {
        Ok(v) => v,
        Err(e) => return fail(f64::INFINITY, format!("conditional update failed: {e}")),
    };

    let (post_layout, lambda_post) = oracle::posterior_information(&layout, &lambda, &change);
    let expected = oracle::conditional_sigma(&lambda_post, &post_layout, post.vars(), &cond);
    let got = post.block(post.vars(), post.vars()).expect("self block");
    ok(rel_frobenius(&got, &expected))
}

fn baseline_case(max_n: usize, suite: u64, seed: u64) -> CaseOutput {
    let mut rng = case_rng(suite, seed);
    let n = rng.gen_range(20..=max_n.min(150));
    // sparse SPD via random factor structure
    let mut dense = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        dense[(i, i)] = 2.5 + rng.gen::<f64>();
    }
    for _ in 0..(3 * n) {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i != j {
            let v = (rng.gen::<f64>() - 0.5) * 0.3;
            dense[(i, j)] += v;
            dense[(j, i)] += v;
        }
    }
    let sparse = crate::linalg::SparseSym::from_dense(&dense);
    let perm = crate::linalg::min_degree_ordering(&sparse);
    let factor = match crate::linalg::cholesky::factorize(&sparse, &perm) {
        Ok(f) => f,
        Err(e) => return fail(f64::INFINITY, format!("factorization failed: {e}")),
    };
    let inv = dense.try_inverse().expect("SPD");
    let rec = match crate::recovery::recover_recursive(&factor) {
        Ok(r) => r,
        Err(e) => return fail(f64::INFINITY, format!("recursive recovery failed: {e}")),
    };
    let back = crate::recovery::recover_backsubstitution(&factor);
    let e1 = rel_frobenius(&rec, &inv);
    let e2 = rel_frobenius(&back, &inv);
    let e3 = rel_frobenius(&rec, &back);
    ok(e1.max(e2).max(e3))
}

fn gain_determinant_case(max_n: usize, suite: u64, seed: u64) -> CaseOutput {
    let mut rng = case_rng(suite, seed);
    let (layout, lambda, sigma) = random_prior(&mut rng, max_n);
    let kind = if seed % 2 == 0 {
        ChangeKind::NotAugmented
    } else {
        ChangeKind::Rectangular
    };
    let change = gen::random_change(&mut rng, kind, &layout, &lambda, 14, 2);
    let sigma_xi = oracle::sigma_block(&sigma, &layout, &change.involved, &change.involved);
    let score = match ramdl::ig_unfocused_change(&change, &sigma_xi) {
        Ok(s) => s,
        Err(e) => return fail(f64::INFINITY, format!("gain evaluation failed: {e}")),
    };
    let (_, lambda_post) = oracle::posterior_information(&layout, &lambda, &change);
    let expected = 0.5
        * (lambda_post.determinant().ln() - lambda.determinant().ln());
    ok((score.value - expected).abs())
}

fn focused_gain_case(max_n: usize, suite: u64, seed: u64) -> CaseOutput {
    let mut rng = case_rng(suite, seed);
    let (layout, lambda, sigma) = random_prior(&mut rng, max_n.min(80));
    let kind = if seed % 2 == 0 {
        ChangeKind::NotAugmented
    } else {
        ChangeKind::Rectangular
    };
    let change = gen::random_change(&mut rng, kind, &layout, &lambda, 10, 2);
    let focus_count = rng.gen_range(1..=4);
    let focus: Vec<VariableKey> = gen::random_subset(&mut rng, &layout, focus_count);

    let sigma_xi = oracle::sigma_block(&sigma, &layout, &change.involved, &change.involved);
    let unfocused_vars: Vec<VariableKey> = change
        .involved
        .iter()
        .copied()
        .filter(|k| !focus.contains(k))
        .collect();
    let restricted = change.restricted_to_unconditioned(&focus);
    let (a_inv, a_new) = change_blocks(&change);
    let (a_unf, _) = change_blocks(&restricted);
    let sigma_cond = oracle::conditional_sigma(&lambda, &layout, &unfocused_vars, &focus);
    let score = match ramdl::ig_focused_old(&a_inv, &a_unf, &sigma_xi, &sigma_cond, a_new.as_ref())
    {
        Ok(s) => s,
        Err(e) => return fail(f64::INFINITY, format!("focused gain failed: {e}")),
    };

    // Eq.-(12)-style oracle: prior and posterior marginal determinants of the
    // focus set from dense inversions.
    let (post_layout, lambda_post) = oracle::posterior_information(&layout, &lambda, &change);
    let sigma_post = lambda_post.try_inverse().expect("posterior SPD");
    let prior_f = oracle::sigma_block(&sigma, &layout, &focus, &focus);
    let post_f = oracle::sigma_block(&sigma_post, &post_layout, &focus, &focus);
    let expected = 0.5 * (prior_f.determinant().ln() - post_f.determinant().ln());
    ok((score.value - expected).abs())
}

fn change_blocks(change: &InferenceChange) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    use crate::recovery::ChangeData;
    match &change.data {
        ChangeData::NotAugmented { block } => (block.clone(), None),
        ChangeData::Rectangular {
            old_block,
            new_block,
            ..
        }
        | ChangeData::Squared {
            old_block,
            new_block,
            ..
        } => (old_block.clone(), Some(new_block.clone())),
        ChangeData::Relinearization { .. } => unreachable!("gain of relinearization"),
    }
}

fn additivity_case(max_n: usize, suite: u64, seed: u64) -> CaseOutput {
    let mut rng = case_rng(suite, seed);
    let (layout, lambda, _) = random_prior(&mut rng, max_n.min(60));
    let belief = match gen::belief_from_information(&layout, &lambda) {
        Ok(b) => b,
        Err(e) => return fail(f64::INFINITY, format!("prior factorization failed: {e}")),
    };
    let segs = rng.gen_range(1..=5);
    let mut next_pose = layout
        .keys()
        .iter()
        .map(|k| k.index + 1)
        .max()
        .unwrap_or(0);
    let mut available: Vec<VariableKey> = layout.keys().to_vec();
    let mut path = Vec::new();
    for s in 0..segs {
        let rect = rng.gen_bool(0.5);
        let inc = gen::random_increment(
            &mut rng,
            SegmentId(s as u64),
            0,
            &available,
            &mut next_pose,
            rect,
        );
        available.extend(inc.new_vars.iter().copied());
        path.push(inc);
    }
    let (sum, direct) = match fgp::ig_additivity_check(&path, &belief) {
        Ok(v) => v,
        Err(e) => return fail(f64::INFINITY, format!("additivity check failed: {e}")),
    };

    // dense telescoped oracle
    let flat = ramdl::concat_increments(0, &path);
    let change = flat
        .to_change(&|k| layout.contains(k))
        .expect("flat increment realizable");
    let (_, lambda_post) = oracle::posterior_information(&layout, &lambda, &change);
    let expected = 0.5 * (lambda_post.determinant().ln() - lambda.determinant().ln());

    let e1 = (sum - direct).abs();
    let e2 = (direct - expected).abs();
    ok(e1.max(e2))
}

/// Random prefix-sharing candidate set over a fresh prior.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    max_n: usize,
    count: usize,
) -> (
    StateLayout,
    DMatrix<f64>,
    Vec<CandidatePath>,
) {
    let (layout, lambda, _) = random_prior(rng, max_n);
    let mut next_pose = layout
        .keys()
        .iter()
        .map(|k| k.index + 1)
        .max()
        .unwrap_or(0);
    let mut next_segment = 0u64;
    let mut fresh_segment = || {
        next_segment += 1;
        SegmentId(next_segment)
    };

    // shared first-layer segments
    let first_count = rng.gen_range(2..=4usize);
    let base: Vec<VariableKey> = layout.keys().to_vec();
    let firsts: Vec<ActionIncrement> = (0..first_count)
        .map(|_| {
            let seg = fresh_segment();
            let rect = rng.gen_bool(0.6);
            gen::random_increment(rng, seg, 0, &base, &mut next_pose, rect)
        })
        .collect();
    // optional shared second layer under each first segment
    let seconds: Vec<Vec<ActionIncrement>> = firsts
        .iter()
        .map(|f| {
            let mut avail = base.clone();
            avail.extend(f.new_vars.iter().copied());
            let layer = rng.gen_range(1..=2usize);
            (0..layer)
                .map(|_| {
                    let seg = fresh_segment();
                    let rect = rng.gen_bool(0.6);
                    gen::random_increment(rng, seg, 0, &avail, &mut next_pose, rect)
                })
                .collect()
        })
        .collect();

    let mut candidates = Vec::with_capacity(count);
    for id in 0..count {
        let f = id % first_count;
        let s = id % seconds[f].len();
        let mut segments = vec![firsts[f].clone(), seconds[f][s].clone()];
        let mut avail = base.clone();
        for seg in &segments {
            avail.extend(seg.new_vars.iter().copied());
        }
        let extra = rng.gen_range(0..=1usize);
        for _ in 0..extra {
            let seg = fresh_segment();
            let rect = rng.gen_bool(0.6);
            let inc = gen::random_increment(rng, seg, 0, &avail, &mut next_pose, rect);
            avail.extend(inc.new_vars.iter().copied());
            segments.push(inc);
        }
        candidates.push(CandidatePath { id, segments });
    }
    (layout, lambda, candidates)
}

/// Dense brute-force scoring of a candidate set (explicit posterior per
/// candidate), used as the decision oracle.
pub fn dense_scene_scores(
    layout: &StateLayout,
    lambda: &DMatrix<f64>,
    candidates: &[CandidatePath],
    objective: &InfoObjective,
) -> Vec<(usize, InfoScore)> {
    let prior_logdet = lambda.determinant().ln();
    let sigma = lambda.clone().try_inverse().expect("prior SPD");
    candidates
        .iter()
        .map(|cand| {
            let flat = ramdl::concat_increments(cand.id, &cand.segments);
            let change = flat
                .to_change(&|k| layout.contains(k))
                .expect("candidate realizable");
            let (post_layout, lambda_post) =
                oracle::posterior_information(layout, lambda, &change);
            let score = match objective {
                InfoObjective::Unfocused => InfoScore {
                    value: 0.5 * (lambda_post.determinant().ln() - prior_logdet),
                    kind: ScoreKind::UnfocusedGain,
                },
                InfoObjective::FocusedOldGain(focus) => {
                    let sigma_post = lambda_post.try_inverse().expect("posterior SPD");
                    let prior_f = oracle::sigma_block(&sigma, layout, focus, focus);
                    let post_f = oracle::sigma_block(&sigma_post, &post_layout, focus, focus);
                    InfoScore {
                        value: 0.5
                            * (prior_f.determinant().ln() - post_f.determinant().ln()),
                        kind: ScoreKind::FocusedGain,
                    }
                }
                InfoObjective::FocusedNewEntropy => {
                    let sigma_post = lambda_post.try_inverse().expect("posterior SPD");
                    let terminal = *flat.new_vars.last().expect("candidate adds variables");
                    let block =
                        oracle::sigma_block(&sigma_post, &post_layout, &[terminal], &[terminal]);
                    InfoScore {
                        value: 0.5 * block.determinant().ln(),
                        kind: ScoreKind::FocusedEntropy,
                    }
                }
            };
            (cand.id, score)
        })
        .collect()
}

fn planner_case(max_n: usize, suite: u64, seed: u64) -> CaseOutput {
    let mut rng = case_rng(suite, seed);
    let count = if seed % 7 == 0 {
        rng.gen_range(100..=200)
    } else {
        rng.gen_range(20..=60)
    };
    let (layout, lambda, candidates) = random_scene(&mut rng, max_n.min(60), count);
    let belief = match gen::belief_from_information(&layout, &lambda) {
        Ok(b) => b,
        Err(e) => return fail(f64::INFINITY, format!("prior factorization failed: {e}")),
    };
    let objective = match seed % 3 {
        0 => InfoObjective::Unfocused,
        1 => {
            let count = rng.gen_range(1..=3);
            InfoObjective::FocusedOldGain(gen::random_subset(&mut rng, &layout, count))
        }
        _ => InfoObjective::FocusedNewEntropy,
    };

    let flat_incs: Vec<ActionIncrement> = candidates
        .iter()
        .map(|c| ramdl::concat_increments(c.id, &c.segments))
        .collect();
    let flat = match ramdl::evaluate_candidates_flat(&flat_incs, &belief, &objective) {
        Ok(f) => f,
        Err(e) => return fail(f64::INFINITY, format!("flat evaluation failed: {e}")),
    };
    let mut tree = match fgp::build_trajectory_tree(&candidates) {
        Ok(t) => t,
        Err(e) => return fail(f64::INFINITY, format!("tree construction failed: {e}")),
    };
    let tree_eval = match fgp::evaluate_tree(&mut tree, &belief, &objective) {
        Ok(t) => t,
        Err(e) => return fail(f64::INFINITY, format!("tree evaluation failed: {e}")),
    };
    let dense_scores = dense_scene_scores(&layout, &lambda, &candidates, &objective);
    let dense_best = crate::ramdl::select_best(&dense_scores);

    if flat.best != tree_eval.best || flat.best != dense_best {
        return fail(
            f64::INFINITY,
            format!(
                "argmax mismatch: flat {}, tree {}, dense {}",
                flat.best, tree_eval.best, dense_best
            ),
        );
    }
    // per-candidate path equivalence and single evaluation of shared edges
    let mut err = 0.0f64;
    let flat_map: std::collections::BTreeMap<usize, f64> =
        flat.scores.iter().map(|(id, s)| (*id, s.value)).collect();
    for (id, s) in &tree_eval.scores {
        err = err.max((flat_map[id] - s.value).abs());
    }
    for e in &tree.edges {
        let expected_evals = if matches!(objective, InfoObjective::FocusedNewEntropy) {
            0
        } else {
            1
        };
        if e.eval_count != expected_evals || e.propagate_count != 1 {
            return fail(
                f64::INFINITY,
                format!(
                    "edge counters off: eval {} propagate {}",
                    e.eval_count, e.propagate_count
                ),
            );
        }
    }
    ok(err)
}

fn slam_step_case(max_n: usize, suite: u64, seed: u64) -> CaseOutput {
    let mut rng = case_rng(suite, seed);
    let (layout, lambda) = loop {
        let (layout, lambda, _) = random_prior(&mut rng, max_n.min(80));
        if layout.keys().iter().any(|k| k.kind == crate::belief::VarKind::Pose) {
            break (layout, lambda);
        }
    };
    let step = random_slam_step(&mut rng, &layout, &lambda);

    let belief = match gen::belief_from_information(&layout, &lambda) {
        Ok(b) => b,
        Err(e) => return fail(f64::INFINITY, format!("prior factorization failed: {e}")),
    };
    let tracker = MarginalTracker::from_belief(&belief);

    let (two, fb1) = match slam_step_update(
        &tracker,
        &step,
        StepStrategy::TwoStage,
        &belief.sqrt_factor,
        None,
    ) {
        Ok(v) => v,
        Err(e) => return fail(f64::INFINITY, format!("two-stage failed: {e}")),
    };
    let (one, fb2) = match slam_step_update(
        &tracker,
        &step,
        StepStrategy::OneStage,
        &belief.sqrt_factor,
        None,
    ) {
        Ok(v) => v,
        Err(e) => return fail(f64::INFINITY, format!("one-stage failed: {e}")),
    };
    if fb1 || fb2 {
        return fail(f64::INFINITY, "unexpected fallback on a small step".into());
    }

    // dense oracle
    let (post_layout, lambda_post) = dense_step_posterior(&layout, &lambda, &step);
    let sigma_post = lambda_post.try_inverse().expect("posterior SPD");
    let mut err_dense = 0.0f64;
    for (&k, m) in two.iter() {
        let expected = oracle::sigma_block(&sigma_post, &post_layout, &[k], &[k]);
        err_dense = err_dense.max(rel_frobenius(m, &expected));
    }
    let cross = two.max_abs_difference(&one);
    if cross > 1e-9 {
        return fail(cross, format!("strategies disagree by {cross:.3e}"));
    }
    ok(err_dense)
}

/// Random synthetic SLAM step over an existing prior.
pub fn random_slam_step(
    rng: &mut ChaCha8Rng,
    layout: &StateLayout,
    lambda: &DMatrix<f64>,
) -> SlamStep {
    let poses: Vec<VariableKey> = layout
        .keys()
        .iter()
        .copied()
        .filter(|k| k.kind == crate::belief::VarKind::Pose)
        .collect();
    let prev_pose = poses[rng.gen_range(0..poses.len())];
    let next_index = layout
        .keys()
        .iter()
        .map(|k| k.index + 1)
        .max()
        .unwrap_or(0);
    let new_pose = VariableKey::pose(next_index);
    let n_landmarks = rng.gen_range(0..=2usize);
    let mut new_vars = vec![new_pose];
    for i in 0..n_landmarks {
        new_vars.push(VariableKey::landmark(next_index + 1 + i));
    }
    let new_dim = StateLayout::dim_of(&new_vars);

    // squared stage: odometry(prev→new pose) + one factor per new landmark
    let squared_involved = vec![prev_pose];
    let mut squared_old = DMatrix::zeros(new_dim, prev_pose.dim());
    squared_old
        .view_mut((0, 0), (3, 3))
        .copy_from(&gen::random_matrix(rng, 3, 3, 0.7));
    let mut squared_new = DMatrix::zeros(new_dim, new_dim);
    squared_new
        .view_mut((0, 0), (3, 3))
        .copy_from(&gen::random_invertible(rng, 3, 1.0));
    let mut row = 3;
    for (i, &lv) in new_vars.iter().skip(1).enumerate() {
        // landmark factor touches the new pose and its landmark
        squared_new
            .view_mut((row, 0), (2, 3))
            .copy_from(&gen::random_matrix(rng, 2, 3, 0.5));
        let off = 3 + i * 2;
        squared_new
            .view_mut((row, off), (2, 2))
            .copy_from(&gen::random_invertible(rng, 2, 1.0));
        row += lv.dim();
    }

    // re-observations: new pose + random old landmarks
    let old_landmarks: Vec<VariableKey> = layout
        .keys()
        .iter()
        .copied()
        .filter(|k| k.kind == crate::belief::VarKind::Landmark)
        .collect();
    let n_reobs = if old_landmarks.is_empty() {
        0
    } else {
        rng.gen_range(0..=3usize.min(old_landmarks.len()))
    };
    let mut reobs_involved = Vec::new();
    let mut reobs_rows = 0;
    if n_reobs > 0 {
        reobs_involved.push(new_pose);
        let mut chosen: Vec<VariableKey> = old_landmarks.clone();
        for i in 0..n_reobs {
            let j = rng.gen_range(i..chosen.len());
            chosen.swap(i, j);
        }
        let mut picked = chosen[..n_reobs].to_vec();
        picked.sort();
        reobs_involved.extend(picked);
        reobs_rows = 2 * n_reobs;
    }
    let reobs_width = StateLayout::dim_of(&reobs_involved);
    let reobs_block = gen::random_matrix(rng, reobs_rows, reobs_width, 0.7);

    // relinearized factors over random old variables, kept PD by rescaling
    let relin_involved: Vec<VariableKey> = if rng.gen_bool(0.7) {
        let count = rng.gen_range(1..=3);
        gen::random_subset(rng, layout, count)
    } else {
        Vec::new()
    };
    let relin_width = StateLayout::dim_of(&relin_involved);
    let relin_rows = if relin_involved.is_empty() {
        0
    } else {
        rng.gen_range(1..=6usize)
    };
    let mut relin_before = gen::random_matrix(rng, relin_rows, relin_width, 0.5);
    let relin_after = gen::random_matrix(rng, relin_rows, relin_width, 0.5);

    let mut step = SlamStep {
        new_vars,
        squared_involved,
        squared_old_block: squared_old,
        squared_new_block: squared_new,
        reobs_involved,
        reobs_block,
        relin_involved,
        relin_before,
        relin_after,
    };
    loop {
        let (_, post) = dense_step_posterior(layout, lambda, &step);
        if post.cholesky().is_some() {
            return step;
        }
        relin_before = step.relin_before * 0.5;
        step.relin_before = relin_before.clone();
    }
}

/// Dense posterior information of a full SLAM step.
pub fn dense_step_posterior(
    layout: &StateLayout,
    lambda: &DMatrix<f64>,
    step: &SlamStep,
) -> (StateLayout, DMatrix<f64>) {
    let post_layout = layout.extended(&step.new_vars);
    let n_post = post_layout.dim();
    let mut post = DMatrix::zeros(n_post, n_post);
    post.view_mut((0, 0), (layout.dim(), layout.dim()))
        .copy_from(lambda);

    let a_sq = oracle::scatter_columns(&post_layout, &step.squared_involved, &step.squared_old_block)
        + oracle::scatter_columns(&post_layout, &step.new_vars, &step.squared_new_block);
    post += a_sq.transpose() * a_sq;
    if step.reobs_block.nrows() > 0 {
        let a_o = oracle::scatter_columns(&post_layout, &step.reobs_involved, &step.reobs_block);
        post += a_o.transpose() * a_o;
    }
    if step.relin_before.nrows() > 0 {
        let before =
            oracle::scatter_columns(&post_layout, &step.relin_involved, &step.relin_before);
        let after = oracle::scatter_columns(&post_layout, &step.relin_involved, &step.relin_after);
        post -= before.transpose() * before;
        post += after.transpose() * after;
    }
    (post_layout, post)
}

/// Runs every suite with the given options.
pub fn run_suites(opts: &VerifyOptions) -> Vec<SuiteOutcome> {
    let max_n = opts.max_n;
    vec![
        run_cases("lemma1-not-augmented", 1e-8, opts, |s| {
            lemma_case(ChangeKind::NotAugmented, max_n, 1, s)
        }),
        run_cases("lemma2-rectangular", 1e-8, opts, |s| {
            lemma_case(ChangeKind::Rectangular, max_n, 2, s)
        }),
        run_cases("lemma3-squared", 1e-8, opts, |s| {
            lemma_case(ChangeKind::Squared, max_n, 3, s)
        }),
        run_cases("lemma4-relinearization", 1e-8, opts, |s| {
            lemma_case(ChangeKind::Relinearization, max_n, 4, s)
        }),
        run_cases("conditional-updates", 1e-8, opts, |s| {
            conditional_case(max_n, 5, s)
        }),
        run_cases("baseline-recovery", 1e-9, opts, |s| baseline_case(max_n, 6, s)),
        run_cases("gain-determinant", 1e-9, opts, |s| {
            gain_determinant_case(max_n, 7, s)
        }),
        run_cases("focused-gain-determinant", 1e-8, opts, |s| {
            focused_gain_case(max_n, 8, s)
        }),
        run_cases("gain-additivity", 1e-9, opts, |s| additivity_case(max_n, 9, s)),
        run_cases("planner-equivalence", 1e-8, opts, |s| {
            planner_case(max_n, 10, s)
        }),
        run_cases("slam-step-strategies", 1e-8, opts, |s| {
            slam_step_case(max_n, 11, s)
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_a_small_budget() {
        let opts = VerifyOptions {
            seeds: 6,
            max_n: 60,
            threads: 2,
            mutate: None,
        };
        for outcome in run_suites(&opts) {
            assert!(
                outcome.passed(),
                "{} failed: {:?} (worst {:.3e})",
                outcome.name,
                outcome.failures.first(),
                outcome.worst
            );
        }
    }

    #[test]
    fn injected_sign_error_is_caught() {
        let opts = VerifyOptions {
            seeds: 6,
            max_n: 50,
            threads: 1,
            mutate: Some(Mutation::RectangularGainFlip),
        };
        let outcomes = run_suites(&opts);
        let lemma2 = outcomes
            .iter()
            .find(|o| o.name == "lemma2-rectangular")
            .expect("suite present");
        assert!(!lemma2.passed(), "mutated rectangular update must fail");
    }
}
