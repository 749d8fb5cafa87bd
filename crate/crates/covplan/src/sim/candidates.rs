use nalgebra::{DMatrix, DVector, Vector3};

use crate::belief::{FactorModel, StateLayout, VariableKey};
use crate::fgp::CandidatePath;
use crate::ramdl::{ActionIncrement, IncrementFactor, InfoScore, SegmentId};

use super::estimator::Estimator;
use super::world::{compose, wrap};
use super::{ObjectiveWeights, ScenarioConfig};

/// A candidate trajectory: its segment increments plus the geometric
/// bookkeeping the outer objective needs.
#[derive(Debug, Clone)]
pub struct CandidateAction {
    pub path: CandidatePath,
    /// Waypoints after the start pose (one per segment).
    pub waypoints: Vec<[f64; 2]>,
    pub terminal_pose: [f64; 3],
    pub path_length: f64,
}

impl CandidateAction {
    pub fn id(&self) -> usize {
        self.path.id
    }
}

/// Sampled trajectories toward the current goal and toward clusters of
/// already-mapped landmarks. Candidates passing through the same first
/// waypoint share an identical first-segment increment.
pub fn generate_candidates(
    estimator: &Estimator,
    goal: [f64; 2],
    config: &ScenarioConfig,
) -> Vec<CandidateAction> {
    let p = config.active.segment_poses.max(1);
    let step = config.world.step_length;
    let fan = config.active.headings.max(1);
    let reach = p as f64 * step;

    let base_key = estimator.current_pose_key();
    let base = estimator.pose_estimate(base_key);
    let landmarks = estimator.landmark_estimates();
    let clusters = kmeans_clusters(
        &landmarks.iter().map(|(_, p)| *p).collect::<Vec<_>>(),
        config.active.clusters,
        5,
    );
    let mut targets = vec![goal];
    targets.extend(clusters);

    let first_pose_index = estimator.pose_count();
    let mut candidates = Vec::new();
    let mut id = 0;
    for h in 0..fan {
        let heading = h as f64 / fan as f64 * std::f64::consts::TAU;
        let w1 = [base[0] + reach * heading.cos(), base[1] + reach * heading.sin()];
        // shared first segment for every candidate through this waypoint
        let (first_seg, first_end) = predict_segment(
            estimator,
            SegmentId(h as u64),
            base_key,
            base,
            w1,
            first_pose_index,
            p,
            step,
            config,
        );
        for (t, &target) in targets.iter().enumerate() {
            let last_first_pose = *first_seg.new_vars.last().expect("segment adds poses");
            let (second_seg, second_end) = predict_segment(
                estimator,
                SegmentId(1_000_000 + (h as u64) * 10_000 + t as u64),
                last_first_pose,
                first_end,
                target,
                first_pose_index + p,
                p,
                step,
                config,
            );
            candidates.push(CandidateAction {
                path: CandidatePath {
                    id,
                    segments: vec![first_seg.clone(), second_seg],
                },
                waypoints: vec![w1, target],
                terminal_pose: [second_end[0], second_end[1], second_end[2]],
                path_length: 2.0 * p as f64 * step,
            });
            id += 1;
        }
    }
    candidates
}

/// Predicts one straight-segment leg: poses steered toward the waypoint with
/// the same bounded-turn rule the simulator uses, odometry factors between
/// consecutive poses and maximum-likelihood range-bearing factors to nearby
/// mapped landmarks.
#[allow(clippy::too_many_arguments)]
fn predict_segment(
    estimator: &Estimator,
    segment: SegmentId,
    anchor_key: VariableKey,
    anchor_pose: Vector3<f64>,
    waypoint: [f64; 2],
    first_pose_index: usize,
    poses: usize,
    step: f64,
    config: &ScenarioConfig,
) -> (ActionIncrement, Vector3<f64>) {
    let landmarks = estimator.landmark_estimates();
    let radius = config.sensor.radius;
    let max_obs = 6usize;

    let mut factors = Vec::new();
    let mut new_vars = Vec::new();
    let mut prev_key = anchor_key;
    let mut prev_pose = anchor_pose;
    for i in 0..poses {
        let key = VariableKey::pose(first_pose_index + i);
        new_vars.push(key);
        let desired = (waypoint[1] - prev_pose[1]).atan2(waypoint[0] - prev_pose[0]);
        let turn = wrap(desired - prev_pose[2]).clamp(-config.world.max_turn, config.world.max_turn);
        let control = Vector3::new(step, 0.0, turn);
        let pose = compose(&prev_pose, &control);

        // odometry between the previous variable and this one
        let (blocks, _) = FactorModel::Odometry.evaluate(&[
            DVector::from_column_slice(prev_pose.as_slice()),
            DVector::from_column_slice(pose.as_slice()),
        ]);
        let w = whitener(estimator.odom_noise());
        factors.push(IncrementFactor {
            involved: vec![prev_key, key],
            blocks: blocks.iter().map(|b| &w * b).collect(),
        });

        // nearest mapped landmarks within the sensing radius
        let mut nearby: Vec<(f64, usize, [f64; 2])> = landmarks
            .iter()
            .filter_map(|(id, lm)| {
                let d = ((lm[0] - pose[0]).powi(2) + (lm[1] - pose[1]).powi(2)).sqrt();
                (d <= radius && d > 1e-6).then_some((d, *id, *lm))
            })
            .collect();
        nearby.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let wrb = whitener(estimator.rb_noise());
        for (_, lm_id, lm) in nearby.into_iter().take(max_obs) {
            let lm_key = estimator.landmark_key(lm_id).expect("mapped landmark");
            let (blocks, _) = FactorModel::RangeBearing.evaluate(&[
                DVector::from_column_slice(pose.as_slice()),
                DVector::from_vec(vec![lm[0], lm[1]]),
            ]);
            factors.push(IncrementFactor {
                involved: vec![key, lm_key],
                blocks: blocks.iter().map(|b| &wrb * b).collect(),
            });
        }

        prev_key = key;
        prev_pose = pose;
    }
    (
        ActionIncrement {
            id: 0,
            segment,
            new_vars,
            factors,
        },
        prev_pose,
    )
}

fn whitener(noise: &DMatrix<f64>) -> DMatrix<f64> {
    let m = noise.nrows();
    noise
        .clone()
        .cholesky()
        .expect("noise SPD")
        .l()
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .expect("triangular solve")
}

/// Plain Lloyd iterations on mapped landmark positions; deterministic
/// (centers seeded from evenly spaced points in id order).
pub fn kmeans_clusters(points: &[[f64; 2]], k: usize, iters: usize) -> Vec<[f64; 2]> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let k = k.min(points.len());
    let mut centers: Vec<[f64; 2]> = (0..k)
        .map(|i| points[i * points.len() / k])
        .collect();
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        for (pi, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assign[pi] = best;
        }
        for (ci, c) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == ci)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                let inv = 1.0 / members.len() as f64;
                c[0] = members.iter().map(|p| p[0]).sum::<f64>() * inv;
                c[1] = members.iter().map(|p| p[1]).sum::<f64>() * inv;
            }
        }
    }
    centers
}

/// Ranked composite objective values.
#[derive(Debug, Clone)]
pub struct RankedObjective {
    /// (candidate id, J value), in input order.
    pub values: Vec<(usize, f64)>,
    /// argmin J, ties to the lowest id.
    pub best: usize,
}

/// J(a) = α₁ · distance(terminal, goal) + α₂ · path length − α₃ · utility,
/// minimized. Larger information utility (gain up, entropy down) lowers J.
pub fn assemble_objective(
    candidates: &[CandidateAction],
    scores: &[(usize, InfoScore)],
    weights: &ObjectiveWeights,
    goal: [f64; 2],
) -> RankedObjective {
    let score_of: std::collections::BTreeMap<usize, &InfoScore> =
        scores.iter().map(|(id, s)| (*id, s)).collect();
    let mut values = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for cand in candidates {
        let d = ((cand.terminal_pose[0] - goal[0]).powi(2)
            + (cand.terminal_pose[1] - goal[1]).powi(2))
        .sqrt();
        let utility = score_of
            .get(&cand.id())
            .map(|s| s.utility())
            .unwrap_or(0.0);
        let j = weights.alpha1 * d + weights.alpha2 * cand.path_length - weights.alpha3 * utility;
        values.push((cand.id(), j));
        let better = match best {
            None => true,
            Some((bid, bj)) => j < bj || (j == bj && cand.id() < bid),
        };
        if better {
            best = Some((cand.id(), j));
        }
    }
    RankedObjective {
        values,
        best: best.expect("candidate list not empty").0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ramdl::ScoreKind;

    fn mk_candidate(id: usize, terminal: [f64; 2], length: f64) -> CandidateAction {
        CandidateAction {
            path: CandidatePath {
                id,
                segments: Vec::new(),
            },
            waypoints: vec![terminal],
            terminal_pose: [terminal[0], terminal[1], 0.0],
            path_length: length,
        }
    }

    fn gain(v: f64) -> InfoScore {
        InfoScore {
            value: v,
            kind: ScoreKind::UnfocusedGain,
        }
    }

    #[test]
    fn info_only_weights_pick_max_gain() {
        let cands = vec![
            mk_candidate(0, [10.0, 0.0], 5.0),
            mk_candidate(1, [0.5, 0.0], 9.0),
        ];
        let scores = vec![(0, gain(2.0)), (1, gain(0.1))];
        let w = ObjectiveWeights {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 1.0,
        };
        let ranked = assemble_objective(&cands, &scores, &w, [0.0, 0.0]);
        assert_eq!(ranked.best, 0);
    }

    #[test]
    fn distance_only_weights_pick_nearest() {
        let cands = vec![
            mk_candidate(0, [10.0, 0.0], 5.0),
            mk_candidate(1, [0.5, 0.0], 9.0),
        ];
        let scores = vec![(0, gain(2.0)), (1, gain(0.1))];
        let w = ObjectiveWeights {
            alpha1: 1.0,
            alpha2: 0.0,
            alpha3: 0.0,
        };
        let ranked = assemble_objective(&cands, &scores, &w, [0.0, 0.0]);
        assert_eq!(ranked.best, 1);
    }

    #[test]
    fn mixed_weights_match_hand_ranking() {
        // J = 1·d + 0.5·len − 2·score
        // c0: d=4, len=2, s=1 → 4 + 1 − 2 = 3
        // c1: d=1, len=6, s=0.5 → 1 + 3 − 1 = 3   (tie with c0 → lower id wins)
        // c2: d=2, len=2, s=1.5 → 2 + 1 − 3 = 0   (winner)
        let cands = vec![
            mk_candidate(0, [4.0, 0.0], 2.0),
            mk_candidate(1, [1.0, 0.0], 6.0),
            mk_candidate(2, [2.0, 0.0], 2.0),
        ];
        let scores = vec![(0, gain(1.0)), (1, gain(0.5)), (2, gain(1.5))];
        let w = ObjectiveWeights {
            alpha1: 1.0,
            alpha2: 0.5,
            alpha3: 2.0,
        };
        let ranked = assemble_objective(&cands, &scores, &w, [0.0, 0.0]);
        assert_eq!(ranked.best, 2);
        let j: std::collections::BTreeMap<usize, f64> = ranked.values.into_iter().collect();
        assert!((j[&0] - 3.0).abs() < 1e-12);
        assert!((j[&1] - 3.0).abs() < 1e-12);
        assert!((j[&2] - 0.0).abs() < 1e-12);

        // ties break toward the lower id
        let cands = vec![mk_candidate(0, [4.0, 0.0], 2.0), mk_candidate(1, [4.0, 0.0], 2.0)];
        let scores = vec![(0, gain(1.0)), (1, gain(1.0))];
        let ranked = assemble_objective(&cands, &scores, &w, [0.0, 0.0]);
        assert_eq!(ranked.best, 0);
    }

    #[test]
    fn kmeans_is_deterministic_and_covers_points() {
        let pts: Vec<[f64; 2]> = (0..20)
            .map(|i| [i as f64 * 3.0, (i % 5) as f64])
            .collect();
        let a = kmeans_clusters(&pts, 4, 5);
        let b = kmeans_clusters(&pts, 4, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(kmeans_clusters(&[], 4, 5).is_empty());
    }
}
