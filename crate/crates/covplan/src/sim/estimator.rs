use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Vector3};

use crate::belief::{
    solve_map, BeliefState, FactorGraph, FactorModel, GaussianFactor, SolverConfig, StateLayout,
    VarKind, VariableKey,
};
use crate::error::Result;
use crate::recovery::SlamStep;

use super::world::{compose, Sighting, StepObservations};
use super::ScenarioConfig;

/// Noise stds are floored so whitening stays well conditioned even in
/// zero-noise test scenarios.
const MODEL_STD_FLOOR: f64 = 1e-3;

/// Smoothing estimator with per-variable linearization-point tracking.
///
/// The tracked belief's information matrix is always the sum of all factors
/// linearized at the tracked points, so each step's change decomposes exactly
/// into the squared / re-observation / relinearization bundle handed to the
/// incremental covariance machinery.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub graph: FactorGraph,
    /// Tracked linearization point of every variable.
    lin_point: DVector<f64>,
    /// Current MAP estimate.
    mean: DVector<f64>,
    belief: BeliefState,
    landmark_of: BTreeMap<usize, VariableKey>,
    pose_count: usize,
    landmark_count: usize,
    solver: SolverConfig,
    odom_noise: DMatrix<f64>,
    rb_noise: DMatrix<f64>,
}

/// Everything one inference step produces for recovery and logging.
#[derive(Debug)]
pub struct EstimatorStep {
    pub slam_step: SlamStep,
    /// Belief before the step (its factor feeds the column fetches).
    pub prior_belief: BeliefState,
    pub n_prior: usize,
    /// Stacked change dimension: squared + re-observation + 2×relinearized.
    pub m: usize,
    pub xi_dim: usize,
    pub relin_poses: usize,
    pub relin_landmarks: usize,
    pub new_landmarks: Vec<usize>,
    pub solver_iterations: usize,
}

impl Estimator {
    /// Anchors the first pose with a prior factor at the configured start.
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        let start = DVector::from_column_slice(&config.world.start);
        let x0 = VariableKey::pose(0);
        let mut graph = FactorGraph::new(StateLayout::new([x0]));
        let prior_noise =
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01, 0.0004]));
        graph.add_factor(GaussianFactor::new(
            vec![x0],
            FactorModel::PosePrior,
            start.clone(),
            prior_noise,
        )?);
        let solver = config.solver.to_solver_config();
        let solve = solve_map(&graph, &start, &solver)?;

        let ot = config.sensor.odom_trans_std.max(MODEL_STD_FLOOR);
        let or = config.sensor.odom_rot_std.max(MODEL_STD_FLOOR);
        let rs = config.sensor.range_std.max(MODEL_STD_FLOOR);
        let bs = config.sensor.bearing_std.max(MODEL_STD_FLOOR);
        Ok(Self {
            graph,
            lin_point: start.clone(),
            mean: solve.belief.mean.clone(),
            belief: solve.belief,
            landmark_of: BTreeMap::new(),
            pose_count: 1,
            landmark_count: 0,
            solver,
            odom_noise: DMatrix::from_diagonal(&DVector::from_vec(vec![
                ot * ot,
                ot * ot,
                or * or,
            ])),
            rb_noise: DMatrix::from_diagonal(&DVector::from_vec(vec![rs * rs, bs * bs])),
        })
    }

    pub fn belief(&self) -> &BeliefState {
        &self.belief
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn current_pose_key(&self) -> VariableKey {
        VariableKey::pose(self.pose_count - 1)
    }

    pub fn pose_count(&self) -> usize {
        self.pose_count
    }

    pub fn pose_estimate(&self, key: VariableKey) -> Vector3<f64> {
        let r = self.graph.layout.range_of(key).expect("pose exists");
        Vector3::new(self.mean[r.start], self.mean[r.start + 1], self.mean[r.start + 2])
    }

    /// Mapped landmarks: (world id, estimated position).
    pub fn landmark_estimates(&self) -> Vec<(usize, [f64; 2])> {
        self.landmark_of
            .iter()
            .map(|(&id, &key)| {
                let r = self.graph.layout.range_of(key).expect("landmark exists");
                (id, [self.mean[r.start], self.mean[r.start + 1]])
            })
            .collect()
    }

    pub fn landmark_key(&self, world_id: usize) -> Option<VariableKey> {
        self.landmark_of.get(&world_id).copied()
    }

    pub fn odom_noise(&self) -> &DMatrix<f64> {
        &self.odom_noise
    }

    pub fn rb_noise(&self) -> &DMatrix<f64> {
        &self.rb_noise
    }

    /// Runs one inference step: state augmentation, MAP solve, threshold
    /// relinearization, tracked-belief refresh and change-bundle assembly.
    ///
    /// `relin_override` replaces the configured threshold for this step
    /// (a negative value forces a full relinearization).
    pub fn step(
        &mut self,
        obs: &StepObservations,
        relin_override: Option<f64>,
    ) -> Result<EstimatorStep> {
        let prior_belief = self.belief.clone();
        let n_prior = prior_belief.layout.dim();

        let prev_pose = self.current_pose_key();
        let new_pose = VariableKey::pose(self.pose_count);
        self.pose_count += 1;

        let prev_mean = self.pose_estimate(prev_pose);
        let pose_init = compose(&prev_mean, &obs.odometry);

        // split sightings into new landmarks and re-observations (by id)
        let mut sightings = obs.sightings.clone();
        sightings.sort_by_key(|s| s.id);
        let mut new_lm_sightings: Vec<Sighting> = Vec::new();
        let mut reobs_sightings: Vec<Sighting> = Vec::new();
        for s in &sightings {
            if self.landmark_of.contains_key(&s.id) {
                reobs_sightings.push(*s);
            } else {
                new_lm_sightings.push(*s);
            }
        }

        let mut new_vars = vec![new_pose];
        let mut new_landmarks = Vec::new();
        let mut inits: Vec<(VariableKey, DVector<f64>)> = vec![(
            new_pose,
            DVector::from_column_slice(pose_init.as_slice()),
        )];
        for s in &new_lm_sightings {
            let key = VariableKey::landmark(self.landmark_count);
            self.landmark_count += 1;
            self.landmark_of.insert(s.id, key);
            new_vars.push(key);
            new_landmarks.push(s.id);
            let a = pose_init[2] + s.bearing;
            inits.push((
                key,
                DVector::from_vec(vec![
                    pose_init[0] + s.range * a.cos(),
                    pose_init[1] + s.range * a.sin(),
                ]),
            ));
        }

        // extend layout and state vectors
        let layout = self.graph.layout.extended(&new_vars);
        let mut lin = DVector::zeros(layout.dim());
        lin.rows_mut(0, self.lin_point.len()).copy_from(&self.lin_point);
        let mut mean = DVector::zeros(layout.dim());
        mean.rows_mut(0, self.mean.len()).copy_from(&self.mean);
        for (k, v) in &inits {
            let r = layout.range_of(*k)?;
            lin.rows_mut(r.start, v.len()).copy_from(v);
            mean.rows_mut(r.start, v.len()).copy_from(v);
        }
        self.graph.layout = layout;

        // new factors: odometry, new-landmark observations, re-observations
        let old_factor_count = self.graph.factors.len();
        let odometry_factor = GaussianFactor::new(
            vec![prev_pose, new_pose],
            FactorModel::Odometry,
            DVector::from_column_slice(obs.odometry.as_slice()),
            self.odom_noise.clone(),
        )?;
        self.graph.add_factor(odometry_factor);
        let squared_factor_range = old_factor_count..old_factor_count + 1 + new_lm_sightings.len();
        for s in &new_lm_sightings {
            let key = self.landmark_of[&s.id];
            self.graph.add_factor(GaussianFactor::new(
                vec![new_pose, key],
                FactorModel::RangeBearing,
                DVector::from_vec(vec![s.range, s.bearing]),
                self.rb_noise.clone(),
            )?);
        }
        let reobs_factor_range =
            squared_factor_range.end..squared_factor_range.end + reobs_sightings.len();
        for s in &reobs_sightings {
            let key = self.landmark_of[&s.id];
            self.graph.add_factor(GaussianFactor::new(
                vec![new_pose, key],
                FactorModel::RangeBearing,
                DVector::from_vec(vec![s.range, s.bearing]),
                self.rb_noise.clone(),
            )?);
        }

        // MAP solve from the tracked linearization point
        let mut solver = self.solver;
        if let Some(t) = relin_override {
            solver.relin_threshold = t;
        }
        let solve = solve_map(&self.graph, &lin, &solver)?;
        self.mean = solve.belief.mean.clone();
        mean.copy_from(&self.mean);

        // relinearization bookkeeping: move the tracked points of variables
        // whose estimate drifted beyond the threshold
        let lin_before = lin.clone();
        let mut relin_poses = 0;
        let mut relin_landmarks = 0;
        let mut moved_old: Vec<VariableKey> = Vec::new();
        for &k in &solve.report.moved {
            let r = self.graph.layout.range_of(k)?;
            lin.rows_mut(r.start, k.dim())
                .copy_from(&mean.rows(r.start, k.dim()));
            if !new_vars.contains(&k) {
                moved_old.push(k);
                match k.kind {
                    VarKind::Pose => relin_poses += 1,
                    VarKind::Landmark => relin_landmarks += 1,
                }
            }
        }
        let relin_factors: Vec<usize> = solve
            .report
            .affected_factors
            .iter()
            .copied()
            .filter(|&i| i < old_factor_count)
            .collect();

        // change-bundle blocks, all linearized at the tracked points
        let slam_step = self.assemble_bundle(
            &lin,
            &lin_before,
            prev_pose,
            &new_vars,
            squared_factor_range.clone(),
            reobs_factor_range.clone(),
            &relin_factors,
        )?;
        let m = slam_step.squared_new_block.nrows()
            + slam_step.reobs_block.nrows()
            + 2 * slam_step.relin_before.nrows();
        let xi_set: BTreeSet<VariableKey> = slam_step
            .squared_involved
            .iter()
            .chain(slam_step.relin_involved.iter())
            .chain(
                slam_step
                    .reobs_involved
                    .iter()
                    .filter(|k| prior_belief.layout.contains(**k)),
            )
            .copied()
            .collect();
        let xi_dim = xi_set.iter().map(|k| k.dim()).sum();

        // tracked belief: refactorize all factors at the tracked points
        self.lin_point = lin;
        self.belief = self.tracked_belief()?;

        Ok(EstimatorStep {
            slam_step,
            prior_belief,
            n_prior,
            m,
            xi_dim,
            relin_poses,
            relin_landmarks,
            new_landmarks,
            solver_iterations: solve.iterations,
        })
    }

    fn tracked_belief(&self) -> Result<BeliefState> {
        use crate::belief::linearize_factors_into_belief;
        linearize_factors_into_belief(&self.graph, &self.lin_point, &self.mean)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble_bundle(
        &self,
        lin: &DVector<f64>,
        lin_before: &DVector<f64>,
        prev_pose: VariableKey,
        new_vars: &[VariableKey],
        squared_factors: std::ops::Range<usize>,
        reobs_factors: std::ops::Range<usize>,
        relin_factors: &[usize],
    ) -> Result<SlamStep> {
        let layout = &self.graph.layout;
        let new_dim = StateLayout::dim_of(new_vars);

        // squared stage: odometry rows then new-landmark rows
        let squared_involved = vec![prev_pose];
        let mut squared_old = DMatrix::zeros(new_dim, prev_pose.dim());
        let mut squared_new = DMatrix::zeros(new_dim, new_dim);
        let mut new_offsets = BTreeMap::new();
        let mut off = 0;
        for &k in new_vars {
            new_offsets.insert(k, off);
            off += k.dim();
        }
        let mut row = 0;
        for fi in squared_factors {
            let f = &self.graph.factors[fi];
            let values: Vec<DVector<f64>> = f
                .involved
                .iter()
                .map(|&k| layout.read(lin, k))
                .collect::<Result<_>>()?;
            let (blocks, _) = f.linearize_at(&values)?;
            for (k, b) in f.involved.iter().zip(&blocks) {
                if *k == prev_pose {
                    squared_old.view_mut((row, 0), (f.dim(), 3)).copy_from(b);
                } else {
                    let c = new_offsets[k];
                    squared_new
                        .view_mut((row, c), (f.dim(), k.dim()))
                        .copy_from(b);
                }
            }
            row += f.dim();
        }

        // re-observations
        let mut reobs_involved_set: BTreeSet<VariableKey> = BTreeSet::new();
        for fi in reobs_factors.clone() {
            reobs_involved_set.extend(self.graph.factors[fi].involved.iter().copied());
        }
        let reobs_involved: Vec<VariableKey> = reobs_involved_set.into_iter().collect();
        let (reobs_block, _) = self.stack_factors(reobs_factors.collect(), &reobs_involved, lin)?;

        // relinearized factors at both points
        let mut relin_involved_set: BTreeSet<VariableKey> = BTreeSet::new();
        for &fi in relin_factors {
            relin_involved_set.extend(self.graph.factors[fi].involved.iter().copied());
        }
        let relin_involved: Vec<VariableKey> = relin_involved_set.into_iter().collect();
        let (relin_before, _) =
            self.stack_factors(relin_factors.to_vec(), &relin_involved, lin_before)?;
        let (relin_after, _) = self.stack_factors(relin_factors.to_vec(), &relin_involved, lin)?;

        Ok(SlamStep {
            new_vars: new_vars.to_vec(),
            squared_involved,
            squared_old_block: squared_old,
            squared_new_block: squared_new,
            reobs_involved,
            reobs_block,
            relin_involved,
            relin_before,
            relin_after,
        })
    }

    /// Stacks noise-weighted Jacobians of the given factors over `columns`.
    fn stack_factors(
        &self,
        factors: Vec<usize>,
        columns: &[VariableKey],
        point: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, usize)> {
        let layout = &self.graph.layout;
        let width = StateLayout::dim_of(columns);
        let mut offsets = BTreeMap::new();
        let mut off = 0;
        for &k in columns {
            offsets.insert(k, off);
            off += k.dim();
        }
        let total: usize = factors.iter().map(|&fi| self.graph.factors[fi].dim()).sum();
        let mut out = DMatrix::zeros(total, width);
        let mut row = 0;
        for fi in factors {
            let f = &self.graph.factors[fi];
            let values: Vec<DVector<f64>> = f
                .involved
                .iter()
                .map(|&k| layout.read(point, k))
                .collect::<Result<_>>()?;
            let (blocks, _) = f.linearize_at(&values)?;
            for (k, b) in f.involved.iter().zip(&blocks) {
                let c = offsets[k];
                out.view_mut((row, c), (f.dim(), k.dim())).copy_from(b);
            }
            row += f.dim();
        }
        Ok((out, total))
    }
}
