//! 2D range-bearing SLAM simulation: world model, smoothing estimator with
//! threshold-based relinearization tracking, candidate-trajectory generation
//! and the passive/active experiment drivers.

mod active;
mod candidates;
mod estimator;
mod log;
mod passive;
mod world;

pub use active::{run_active, ActiveOutcome};
pub use candidates::{assemble_objective, generate_candidates, CandidateAction, RankedObjective};
pub use estimator::{Estimator, EstimatorStep};
pub use log::{RunLog, StepRecord, TimingRecord};
pub use passive::{run_passive, PassiveOutcome, RecoveryMethod};
pub use world::{SimWorld, StepObservations, WorldModel};

use serde::{Deserialize, Serialize};

use crate::belief::SolverConfig;

/// Scenario description: world geometry, sensor, solver, objective weights
/// and experiment sizes. Everything is serializable so runs are reproducible
/// from a single file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub sensor: SensorConfig,
    pub solver: SolverSection,
    pub weights: ObjectiveWeights,
    pub passive: PassiveConfig,
    pub active: ActiveConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub width: f64,
    pub height: f64,
    pub landmark_count: usize,
    /// Goal waypoints; empty selects a default ring of eight goals.
    pub goals: Vec<[f64; 2]>,
    pub start: [f64; 3],
    /// Distance advanced per simulation step.
    pub step_length: f64,
    /// Maximum heading change per simulation step.
    pub max_turn: f64,
    /// A goal counts as reached within this distance.
    pub goal_tolerance: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 500.0,
            height: 500.0,
            landmark_count: 300,
            goals: Vec::new(),
            start: [250.0, 250.0, 0.0],
            step_length: 5.0,
            max_turn: 0.5,
            goal_tolerance: 12.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub radius: f64,
    pub range_std: f64,
    pub bearing_std: f64,
    /// Odometry noise stds: translation (per axis) and rotation.
    pub odom_trans_std: f64,
    pub odom_rot_std: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            radius: 75.0,
            range_std: 0.4,
            bearing_std: 0.01,
            odom_trans_std: 0.06,
            odom_rot_std: 0.003,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub max_iters: usize,
    pub step_tol: f64,
    pub relin_threshold: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            max_iters: d.max_iters,
            step_tol: d.step_tol,
            relin_threshold: d.relin_threshold,
        }
    }
}

impl SolverSection {
    pub fn to_solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.max_iters,
            step_tol: self.step_tol,
            relin_threshold: self.relin_threshold,
        }
    }
}

/// J(a) = α₁·distance-to-goal + α₂·control cost − α₃·information utility.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.2,
            alpha3: 6.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PassiveConfig {
    pub steps: usize,
    /// Force a full relinearization at this step, emulating the factor churn
    /// of a large loop closure.
    pub force_full_relin_step: Option<usize>,
}

impl Default for PassiveConfig {
    fn default() -> Self {
        Self {
            steps: 120,
            force_full_relin_step: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveConfig {
    /// Planning cycles to run.
    pub planning_steps: usize,
    /// Poses per trajectory segment.
    pub segment_poses: usize,
    /// First-layer heading fan size (shared prefixes).
    pub headings: usize,
    /// Landmark cluster targets added to the goal target.
    pub clusters: usize,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            planning_steps: 12,
            segment_poses: 5,
            headings: 16,
            clusters: 11,
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            world: WorldConfig::default(),
            sensor: SensorConfig::default(),
            solver: SolverSection::default(),
            weights: ObjectiveWeights::default(),
            passive: PassiveConfig::default(),
            active: ActiveConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> crate::Result<Self> {
        toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the canonical serialized form, for reproducibility
    /// metadata in run summaries.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex_string(&h.finalize())
    }

    /// Goal list with the default ring substituted when none are configured.
    pub fn goal_points(&self) -> Vec<[f64; 2]> {
        if !self.world.goals.is_empty() {
            return self.world.goals.clone();
        }
        let cx = self.world.width / 2.0;
        let cy = self.world.height / 2.0;
        let r = 0.38 * self.world.width.min(self.world.height);
        (0..8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::FRAC_PI_4;
                [cx + r * a.cos(), cy + r * a.sin()]
            })
            .collect()
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
