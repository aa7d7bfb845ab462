//! ORCA-style crowd simulation: scenario generation and rollouts.
//!
//! Scenarios place up to `max_agents` pedestrians (default 40) in a square
//! environment (default 15 m x 15 m) with up to `max_obstacles` static
//! primitive obstacles, each agent walking to a sampled goal. Rollouts are
//! pure functions of the scenario, so identical seeds give byte-identical
//! trajectories.

mod lp;
mod orca;

pub use lp::{solve_velocity_lp, solve_velocity_lp_fixed, HalfPlane};
pub use orca::{agent_constraints, orca_step, preferred_velocity, OrcaParams};

use crate::dataio::TrajectorySequence;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::vec2::{vec2, Vec2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pub position: Vec2,
    pub velocity: Vec2,
    pub goal: Vec2,
    /// Body radius, meters. Must be positive.
    pub radius: f64,
    /// Hard speed cap, m/s. Must be >= pref_speed.
    pub max_speed: f64,
    /// Walking speed toward the goal, m/s. Must be positive.
    pub pref_speed: f64,
}

impl Agent {
    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 || self.pref_speed <= 0.0 || self.max_speed < self.pref_speed {
            return Err(Error::Invalid(format!(
                "agent {}: radius/speed invariants violated",
                self.id
            )));
        }
        if !(self.position.is_finite() && self.velocity.is_finite() && self.goal.is_finite()) {
            return Err(Error::Invalid(format!("agent {}: non-finite field", self.id)));
        }
        Ok(())
    }
}

/// A static primitive: a wall segment (2 vertices) or a convex polygon
/// (3+ vertices, traversed as a closed loop).
#[derive(Debug, Clone)]
pub struct Obstacle {
    vertices: Vec<Vec2>,
}

impl Obstacle {
    pub fn new(vertices: Vec<Vec2>) -> Result<Obstacle> {
        if vertices.len() < 2 {
            return Err(Error::Invalid("obstacle needs at least 2 vertices".into()));
        }
        for pair in vertices.windows(2) {
            if (pair[0] - pair[1]).norm() < 1e-9 {
                return Err(Error::Invalid("consecutive obstacle vertices coincide".into()));
            }
        }
        Ok(Obstacle { vertices })
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    /// Directed boundary segments; polygons are closed, a 2-vertex obstacle
    /// is a single free-standing wall.
    pub fn segments(&self) -> Vec<(Vec2, Vec2)> {
        let n = self.vertices.len();
        if n == 2 {
            return vec![(self.vertices[0], self.vertices[1])];
        }
        (0..n)
            .map(|i| (self.vertices[i], self.vertices[(i + 1) % n]))
            .collect()
    }

    /// Distance from a point to the obstacle boundary; 0 inside a polygon.
    pub fn clearance(&self, p: Vec2) -> f64 {
        if self.vertices.len() > 2 && self.contains(p) {
            return 0.0;
        }
        self.segments()
            .iter()
            .map(|&(a, b)| orca::segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    fn contains(&self, p: Vec2) -> bool {
        // Convex polygon: consistent orientation of p against every edge.
        let mut sign = 0.0f64;
        for (a, b) in self.segments() {
            let d = (b - a).det(p - a);
            if d.abs() < 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = d.signum();
            } else if d.signum() != sign {
                return false;
            }
        }
        true
    }
}

/// Scenario generation knobs. Defaults follow pedestrian-scale kinematics
/// with a 0.4 s frame interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Side length of the square environment, meters.
    pub bounds: f64,
    pub min_agents: usize,
    pub max_agents: usize,
    pub max_obstacles: usize,
    pub radius: f64,
    pub pref_speed: f64,
    pub max_speed: f64,
    /// Frame interval, seconds.
    pub dt: f64,
    /// Goals are sampled at least this far from the start, meters.
    pub goal_min_dist: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            bounds: 15.0,
            min_agents: 1,
            max_agents: 40,
            max_obstacles: 20,
            radius: 0.3,
            pref_speed: 1.3,
            max_speed: 1.8,
            dt: 0.4,
            goal_min_dist: 3.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bounds > 0.0
            && self.min_agents >= 1
            && self.max_agents >= self.min_agents
            && self.radius > 0.0
            && self.pref_speed > 0.0
            && self.max_speed >= self.pref_speed
            && self.dt > 0.0
            && self.goal_min_dist > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("scenario config limits must be positive".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub agents: Vec<Agent>,
    pub obstacles: Vec<Obstacle>,
    /// Side length of the axis-aligned square environment centered at the origin.
    pub bounds: f64,
    pub dt: f64,
    pub seed: u64,
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Generates a scenario deterministically from `(seed, config)`: agents
/// placed without initial overlap and clear of obstacles, goals at least
/// `goal_min_dist` away from the start.
pub fn generate_scenario(seed: u64, config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = rng_from_seed(derive_seed(seed, "scenario"));
    let half = config.bounds / 2.0;

    let n_obstacles = if config.max_obstacles == 0 {
        0
    } else {
        rng.gen_range(0..=config.max_obstacles)
    };
    let mut obstacles = Vec::with_capacity(n_obstacles);
    for _ in 0..n_obstacles {
        let cx = (rng.gen::<f64>() - 0.5) * (config.bounds - 4.0).max(1.0);
        let cy = (rng.gen::<f64>() - 0.5) * (config.bounds - 4.0).max(1.0);
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let dir = vec2(angle.cos(), angle.sin());
        if rng.gen_bool(0.5) {
            // Wall segment, 1-3 m.
            let len = 1.0 + rng.gen::<f64>() * 2.0;
            let a = vec2(cx, cy) - dir * (len / 2.0);
            let b = vec2(cx, cy) + dir * (len / 2.0);
            obstacles.push(Obstacle::new(vec![a, b])?);
        } else {
            // Small rectangle, 0.4-1.5 m sides, counter-clockwise.
            let w = 0.4 + rng.gen::<f64>() * 1.1;
            let h = 0.4 + rng.gen::<f64>() * 1.1;
            let u = dir;
            let v = dir.perp_ccw();
            let c = vec2(cx, cy);
            obstacles.push(Obstacle::new(vec![
                c - u * (w / 2.0) - v * (h / 2.0),
                c + u * (w / 2.0) - v * (h / 2.0),
                c + u * (w / 2.0) + v * (h / 2.0),
                c - u * (w / 2.0) + v * (h / 2.0),
            ])?);
        }
    }

    let n_agents = if config.min_agents == config.max_agents {
        config.min_agents
    } else {
        rng.gen_range(config.min_agents..=config.max_agents)
    };

    let margin = config.radius;
    let sample_point = |rng: &mut rand_chacha::ChaCha8Rng| {
        vec2(
            (rng.gen::<f64>() - 0.5) * 2.0 * (half - margin),
            (rng.gen::<f64>() - 0.5) * 2.0 * (half - margin),
        )
    };
    let clear_of_obstacles =
        |p: Vec2, obstacles: &[Obstacle]| obstacles.iter().all(|o| o.clearance(p) >= config.radius);

    let mut agents: Vec<Agent> = Vec::with_capacity(n_agents);
    for id in 0..n_agents {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = sample_point(&mut rng);
            let overlaps = agents
                .iter()
                .any(|a| (a.position - p).norm() < a.radius + config.radius);
            if overlaps || !clear_of_obstacles(p, &obstacles) {
                continue;
            }
            let mut goal = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let g = sample_point(&mut rng);
                if (g - p).norm() >= config.goal_min_dist && clear_of_obstacles(g, &obstacles) {
                    goal = Some(g);
                    break;
                }
            }
            let Some(goal) = goal else {
                return Err(Error::ScenarioInfeasible {
                    seed,
                    msg: format!("no goal for agent {id} after {PLACEMENT_ATTEMPTS} attempts"),
                });
            };
            agents.push(Agent {
                id,
                position: p,
                velocity: Vec2::ZERO,
                goal,
                radius: config.radius,
                max_speed: config.max_speed,
                pref_speed: config.pref_speed,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::ScenarioInfeasible {
                seed,
                msg: format!("no placement for agent {id} after {PLACEMENT_ATTEMPTS} attempts"),
            });
        }
    }

    Ok(Scenario {
        agents,
        obstacles,
        bounds: config.bounds,
        dt: config.dt,
        seed,
    })
}

/// Rolls the scenario forward and records `steps` frames (the first frame is
/// the initial state, followed by `steps - 1` integration steps of
/// `position += velocity * dt`). Per-agent ids persist across frames.
pub fn rollout(scenario: &Scenario, steps: usize, params: &OrcaParams) -> Result<TrajectorySequence> {
    let mut agents = scenario.agents.clone();
    for a in &agents {
        a.validate()?;
    }
    let mut frames = Vec::with_capacity(steps);
    for frame_id in 0..steps {
        frames.push((
            frame_id as i64,
            agents
                .iter()
                .map(|a| (a.id as i64, [a.position.x, a.position.y]))
                .collect::<Vec<_>>(),
        ));
        if frame_id + 1 == steps {
            break;
        }
        let velocities = orca_step(&agents, &scenario.obstacles, params, scenario.dt)?;
        for (agent, v) in agents.iter_mut().zip(&velocities) {
            agent.velocity = *v;
            agent.position += *v * scenario.dt;
        }
    }
    TrajectorySequence::from_frames(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_obstacle_config() -> ScenarioConfig {
        ScenarioConfig {
            max_obstacles: 0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn single_agent_scenario_inside_bounds() {
        let config = ScenarioConfig {
            min_agents: 1,
            max_agents: 1,
            max_obstacles: 0,
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(7, &config).unwrap();
        assert_eq!(s.agents.len(), 1);
        let p = s.agents[0].position;
        assert!(p.x.abs() <= 7.5 && p.y.abs() <= 7.5);
        assert!((s.agents[0].goal - p).norm() >= 3.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = ScenarioConfig::default();
        let a = generate_scenario(7, &config).unwrap();
        let b = generate_scenario(7, &config).unwrap();
        assert_eq!(a.agents.len(), b.agents.len());
        for (x, y) in a.agents.iter().zip(&b.agents) {
            assert_eq!(x.position, y.position);
            assert_eq!(x.goal, y.goal);
        }
        assert_eq!(a.obstacles.len(), b.obstacles.len());
    }

    /// Brute-force pairwise overlap scan across a seed sweep.
    #[test]
    fn no_initial_overlap_across_seeds() {
        let config = ScenarioConfig {
            min_agents: 40,
            max_agents: 40,
            ..ScenarioConfig::default()
        };
        for seed in 0..100 {
            let s = generate_scenario(seed, &config).unwrap();
            for i in 0..s.agents.len() {
                for j in (i + 1)..s.agents.len() {
                    let d = (s.agents[i].position - s.agents[j].position).norm();
                    let min = s.agents[i].radius + s.agents[j].radius;
                    assert!(d >= min, "seed {seed}: agents {i},{j} at {d} < {min}");
                }
            }
        }
    }

    #[test]
    fn unobstructed_agent_walks_straight_at_pref_speed() {
        let config = ScenarioConfig {
            min_agents: 1,
            max_agents: 1,
            max_obstacles: 0,
            ..ScenarioConfig::default()
        };
        let mut s = generate_scenario(3, &config).unwrap();
        s.agents[0].position = Vec2::ZERO;
        s.agents[0].goal = vec2(10.0, 0.0);
        let seq = rollout(&s, 30, &OrcaParams::default()).unwrap();
        let frames = seq.frames();
        for w in frames.windows(2) {
            let p0 = Vec2::from(w[0].1[0].1);
            let p1 = Vec2::from(w[1].1[0].1);
            let step = (p1 - p0).norm();
            let remaining = (vec2(10.0, 0.0) - p0).norm();
            if remaining > 0.6 {
                assert!((step - 1.3 * 0.4).abs() < 1e-6, "step {step}");
                assert!(p1.y.abs() < 1e-9, "must stay on the axis");
            }
        }
    }

    /// A single unobstructed agent reaches its goal within the step bound.
    #[test]
    fn goal_progress_bound() {
        let config = no_obstacle_config();
        for seed in 0..20 {
            let single = ScenarioConfig {
                min_agents: 1,
                max_agents: 1,
                ..config.clone()
            };
            let s = generate_scenario(seed, &single).unwrap();
            let dist = (s.agents[0].goal - s.agents[0].position).norm();
            let bound = (dist / (s.agents[0].pref_speed * s.dt)).ceil() as usize + 5;
            let seq = rollout(&s, bound + 1, &OrcaParams::default()).unwrap();
            let last = Vec2::from(seq.frames().last().unwrap().1[0].1);
            assert!(
                (last - s.agents[0].goal).norm() <= 0.2,
                "seed {seed}: {} m from goal after {bound} steps",
                (last - s.agents[0].goal).norm()
            );
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let config = ScenarioConfig::default();
        let s = generate_scenario(5, &config).unwrap();
        let a = rollout(&s, 60, &OrcaParams::default()).unwrap();
        let b = rollout(&s, 60, &OrcaParams::default()).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
    }

    /// Collision scan over a handful of crowded rollouts; the full 100-seed
    /// sweep runs in the acceptance suite.
    #[test]
    fn crowded_rollouts_rarely_collide() {
        let config = ScenarioConfig {
            min_agents: 40,
            max_agents: 40,
            ..ScenarioConfig::default()
        };
        let mut slots = 0usize;
        let mut collisions = 0usize;
        for seed in 0..5 {
            let s = generate_scenario(seed, &config).unwrap();
            let seq = rollout(&s, 60, &OrcaParams::default()).unwrap();
            for (_, entries) in seq.frames() {
                for i in 0..entries.len() {
                    for j in (i + 1)..entries.len() {
                        slots += 1;
                        let d = (Vec2::from(entries[i].1) - Vec2::from(entries[j].1)).norm();
                        if d < 2.0 * 0.3 - 0.05 {
                            collisions += 1;
                        }
                    }
                }
            }
        }
        let rate = collisions as f64 / slots as f64;
        assert!(rate < 0.01, "collision rate {rate} over {slots} slots");
    }
}
