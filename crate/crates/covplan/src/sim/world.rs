use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ScenarioConfig, SensorConfig};

pub(crate) fn wrap(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Pose composition: `pose ⊕ (dx, dy, dθ)` in the robot frame.
pub(crate) fn compose(pose: &Vector3<f64>, u: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = pose[2].sin_cos();
    Vector3::new(
        pose[0] + c * u[0] - s * u[1],
        pose[1] + s * u[0] + c * u[1],
        wrap(pose[2] + u[2]),
    )
}

/// Ground truth: landmark positions, goal sequence and field dimensions.
/// Deterministic for a given seed.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub landmarks: Vec<[f64; 2]>,
    pub goals: Vec<[f64; 2]>,
    pub width: f64,
    pub height: f64,
}

impl WorldModel {
    pub fn generate(config: &ScenarioConfig) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_mul(31).wrapping_add(1));
        let landmarks = (0..config.world.landmark_count)
            .map(|_| {
                [
                    rng.gen::<f64>() * config.world.width,
                    rng.gen::<f64>() * config.world.height,
                ]
            })
            .collect();
        Self {
            landmarks,
            goals: config.goal_points(),
            width: config.world.width,
            height: config.world.height,
        }
    }
}

/// One landmark sighting: ground-truth id, range, bearing.
#[derive(Debug, Clone, Copy)]
pub struct Sighting {
    pub id: usize,
    pub range: f64,
    pub bearing: f64,
}

#[derive(Debug, Clone)]
pub struct StepObservations {
    /// Noisy odometry (robot-frame translation and heading change).
    pub odometry: Vector3<f64>,
    pub sightings: Vec<Sighting>,
}

/// Simulation state: true pose, measurement RNG and the goal cursor.
#[derive(Debug, Clone)]
pub struct SimWorld {
    pub model: WorldModel,
    pub truth: Vector3<f64>,
    pub goal_index: usize,
    sensor: SensorConfig,
    rng: ChaCha12Rng,
    step_length: f64,
    max_turn: f64,
    goal_tolerance: f64,
}

impl SimWorld {
    pub fn new(config: &ScenarioConfig) -> Self {
        let model = WorldModel::generate(config);
        Self {
            model,
            truth: Vector3::new(
                config.world.start[0],
                config.world.start[1],
                config.world.start[2],
            ),
            goal_index: 0,
            sensor: config.sensor.clone(),
            rng: ChaCha12Rng::seed_from_u64(config.seed),
            step_length: config.world.step_length,
            max_turn: config.world.max_turn,
            goal_tolerance: config.world.goal_tolerance,
        }
    }

    pub fn sensor(&self) -> &SensorConfig {
        &self.sensor
    }

    pub fn current_goal(&self) -> [f64; 2] {
        self.model.goals[self.goal_index % self.model.goals.len()]
    }

    /// Advances the goal cursor when the true pose is close enough.
    pub fn advance_goal_if_reached(&mut self) -> bool {
        let g = self.current_goal();
        let d = ((self.truth[0] - g[0]).powi(2) + (self.truth[1] - g[1]).powi(2)).sqrt();
        if d < self.goal_tolerance {
            self.goal_index += 1;
            true
        } else {
            false
        }
    }

    /// Control that steers toward `target` with bounded turn rate.
    pub fn control_toward(&self, target: [f64; 2]) -> Vector3<f64> {
        let desired = (target[1] - self.truth[1]).atan2(target[0] - self.truth[0]);
        let turn = wrap(desired - self.truth[2]).clamp(-self.max_turn, self.max_turn);
        Vector3::new(self.step_length, 0.0, turn)
    }

    fn gauss(&mut self, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        z * std
    }

    /// Moves the true pose by `control` and returns noisy odometry plus all
    /// landmark sightings within the sensing radius.
    pub fn step(&mut self, control: &Vector3<f64>) -> StepObservations {
        assert!(
            control.iter().all(|v| v.is_finite()),
            "control must be finite"
        );
        self.truth = compose(&self.truth, control);
        let odometry = Vector3::new(
            control[0] + self.gauss(self.sensor.odom_trans_std),
            control[1] + self.gauss(self.sensor.odom_trans_std),
            wrap(control[2] + self.gauss(self.sensor.odom_rot_std)),
        );

        let mut sightings = Vec::new();
        for (id, lm) in self.model.landmarks.iter().enumerate() {
            let dx = lm[0] - self.truth[0];
            let dy = lm[1] - self.truth[1];
            let range = (dx * dx + dy * dy).sqrt();
            if range > self.sensor.radius {
                continue;
            }
            let bearing = wrap(dy.atan2(dx) - self.truth[2]);
            sightings.push(Sighting {
                id,
                range: range + self.gauss(self.sensor.range_std),
                bearing: wrap(bearing + self.gauss(self.sensor.bearing_std)),
            });
        }
        StepObservations {
            odometry,
            sightings,
        }
    }

    /// True pose as a dynamic vector (testing convenience).
    pub fn truth_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.truth.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise_config() -> ScenarioConfig {
        let mut c = ScenarioConfig {
            seed: 5,
            ..Default::default()
        };
        c.sensor.range_std = 0.0;
        c.sensor.bearing_std = 0.0;
        c.sensor.odom_trans_std = 0.0;
        c.sensor.odom_rot_std = 0.0;
        c.world.landmark_count = 20;
        c
    }

    #[test]
    fn zero_noise_observations_match_geometry() {
        let cfg = zero_noise_config();
        let mut world = SimWorld::new(&cfg);
        let control = Vector3::new(3.0, 0.0, 0.1);
        let obs = world.step(&control);
        assert_eq!(obs.odometry, control);
        for s in &obs.sightings {
            let lm = world.model.landmarks[s.id];
            let dx = lm[0] - world.truth[0];
            let dy = lm[1] - world.truth[1];
            assert!((s.range - (dx * dx + dy * dy).sqrt()).abs() < 1e-12);
            assert!((s.bearing - wrap(dy.atan2(dx) - world.truth[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn landmarks_outside_radius_are_not_observed() {
        let cfg = zero_noise_config();
        let mut world = SimWorld::new(&cfg);
        let obs = world.step(&Vector3::new(1.0, 0.0, 0.0));
        for s in &obs.sightings {
            assert!(s.range <= world.sensor.radius + 1e-9);
        }
        let seen: std::collections::BTreeSet<usize> = obs.sightings.iter().map(|s| s.id).collect();
        for (id, lm) in world.model.landmarks.iter().enumerate() {
            let d = ((lm[0] - world.truth[0]).powi(2) + (lm[1] - world.truth[1]).powi(2)).sqrt();
            if d > world.sensor.radius {
                assert!(!seen.contains(&id));
            }
        }
    }

    #[test]
    fn fixed_seed_replays_identically() {
        let cfg = ScenarioConfig {
            seed: 42,
            ..Default::default()
        };
        let run = |mut w: SimWorld| -> Vec<StepObservations> {
            (0..10)
                .map(|_| {
                    let g = w.current_goal();
                    let c = w.control_toward(g);
                    w.step(&c)
                })
                .collect()
        };
        let a = run(SimWorld::new(&cfg));
        let b = run(SimWorld::new(&cfg));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.odometry, y.odometry);
            assert_eq!(x.sightings.len(), y.sightings.len());
            for (s, t) in x.sightings.iter().zip(&y.sightings) {
                assert_eq!(s.id, t.id);
                assert_eq!(s.range.to_bits(), t.range.to_bits());
                assert_eq!(s.bearing.to_bits(), t.bearing.to_bits());
            }
        }
    }
}
