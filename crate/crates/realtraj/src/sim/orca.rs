//! Reciprocal collision-avoidance constraint construction: each neighbor
//! and obstacle segment contributes one half-plane in velocity space, and
//! the new velocity is the constrained point closest to the preferred one.

use super::lp::{solve_velocity_lp_fixed, HalfPlane};
use super::{Agent, Obstacle};
use crate::error::{Error, Result};
use crate::vec2::{vec2, Vec2};

/// Simulation-step parameters.
#[derive(Debug, Clone, Copy)]
pub struct OrcaParams {
    /// Time horizon for agent-agent avoidance (seconds).
    pub tau: f64,
    /// Time horizon for static obstacles (seconds).
    pub tau_obst: f64,
    /// Only neighbors closer than this contribute constraints (meters).
    pub neighbor_dist: f64,
    /// An agent within this distance of its goal prefers zero velocity.
    pub goal_tolerance: f64,
}

impl Default for OrcaParams {
    fn default() -> Self {
        OrcaParams {
            tau: 2.0,
            tau_obst: 2.0,
            neighbor_dist: 5.0,
            goal_tolerance: 0.1,
        }
    }
}

const EPS: f64 = 1e-12;
/// Lateral nudge applied to exactly head-on symmetric encounters
/// (right-hand preference).
const TIE_BREAK: f64 = 1e-6;

/// Preferred velocity: straight at the goal at preferred speed, slowing on
/// final approach so the goal is not overshot; zero within tolerance.
pub fn preferred_velocity(agent: &Agent, dt: f64, goal_tolerance: f64) -> Vec2 {
    let to_goal = agent.goal - agent.position;
    let dist = to_goal.norm();
    if dist <= goal_tolerance {
        return Vec2::ZERO;
    }
    to_goal / dist * agent.pref_speed.min(dist / dt)
}

/// One ORCA half-plane for the pair (agent, other), reciprocal with factor
/// one half.
fn agent_plane(agent: &Agent, other: &Agent, tau: f64, dt: f64) -> HalfPlane {
    let mut relative_position = other.position - agent.position;
    let relative_velocity = agent.velocity - other.velocity;

    // Exactly collinear head-on approach is a measure-zero degeneracy where
    // both agents would pick mirrored velocities forever; nudge the relative
    // position to the right.
    if relative_position.det(relative_velocity).abs() < EPS
        && relative_velocity.dot(relative_position) < 0.0
    {
        relative_position += relative_position.normalized().perp_cw() * TIE_BREAK;
    }

    let dist_sq = relative_position.norm_sq();
    let combined_radius = agent.radius + other.radius;
    let combined_radius_sq = combined_radius * combined_radius;

    let (u, normal);
    if dist_sq > combined_radius_sq {
        // No current collision: project onto the velocity obstacle truncated
        // at horizon tau.
        let w = relative_velocity - relative_position / tau;
        let w_len_sq = w.norm_sq();
        let dot1 = w.dot(relative_position);
        if dot1 < 0.0 && dot1 * dot1 > combined_radius_sq * w_len_sq {
            // Closest to the cutoff circle.
            let w_len = w_len_sq.sqrt();
            let unit_w = if w_len > EPS {
                w / w_len
            } else {
                -relative_position.normalized()
            };
            normal = unit_w;
            u = (combined_radius / tau - w_len) * unit_w;
        } else {
            // Closest to one of the legs.
            let leg = (dist_sq - combined_radius_sq).sqrt();
            let dir = if relative_position.det(w) > 0.0 {
                vec2(
                    relative_position.x * leg - relative_position.y * combined_radius,
                    relative_position.x * combined_radius + relative_position.y * leg,
                ) / dist_sq
            } else {
                -vec2(
                    relative_position.x * leg + relative_position.y * combined_radius,
                    -relative_position.x * combined_radius + relative_position.y * leg,
                ) / dist_sq
            };
            u = dir * relative_velocity.dot(dir) - relative_velocity;
            normal = dir.perp_ccw();
        }
    } else {
        // Already colliding: resolve within one timestep.
        let inv_dt = 1.0 / dt;
        let w = relative_velocity - relative_position * inv_dt;
        let w_len = w.norm();
        let unit_w = if w_len > EPS {
            w / w_len
        } else if relative_position.norm_sq() > EPS {
            -relative_position.normalized()
        } else {
            vec2(1.0, 0.0)
        };
        normal = unit_w;
        u = (combined_radius * inv_dt - w_len) * unit_w;
    }

    HalfPlane {
        point: agent.velocity + 0.5 * u,
        normal: normal.normalized(),
    }
}

/// ORCA half-planes for one obstacle segment (p1, p2). The agent takes full
/// responsibility (no reciprocity) and the constraint is never relaxed.
fn push_segment_planes(
    planes: &mut Vec<HalfPlane>,
    agent: &Agent,
    p1: Vec2,
    p2: Vec2,
    tau_obst: f64,
) {
    // Orient the segment so the agent lies on its right, matching the
    // counter-clockwise polygon convention (interior on the left of each
    // directed edge). Free-standing walls constrain from whichever side the
    // agent approaches.
    let (p1, p2) = if (p2 - p1).det(agent.position - p1) > 0.0 {
        (p2, p1)
    } else {
        (p1, p2)
    };

    let inv_tau = 1.0 / tau_obst;
    let radius = agent.radius;
    let radius_sq = radius * radius;
    let relative_position1 = p1 - agent.position;
    let relative_position2 = p2 - agent.position;

    // Skip when the whole velocity obstacle already lies beyond an existing
    // obstacle plane.
    let covered = planes.iter().any(|pl| {
        let dir = pl.normal.perp_cw();
        (inv_tau * relative_position1 - pl.point).det(dir) - inv_tau * radius >= -EPS
            && (inv_tau * relative_position2 - pl.point).det(dir) - inv_tau * radius >= -EPS
    });
    if covered {
        return;
    }

    let dist_sq1 = relative_position1.norm_sq();
    let dist_sq2 = relative_position2.norm_sq();
    let obstacle_vector = p2 - p1;
    let seg_len_sq = obstacle_vector.norm_sq();
    let is_point = seg_len_sq < EPS;
    let s = if is_point {
        0.0
    } else {
        -relative_position1.dot(obstacle_vector) / seg_len_sq
    };
    let dist_sq_line = (-relative_position1 - s * obstacle_vector).norm_sq();

    let push = |planes: &mut Vec<HalfPlane>, point: Vec2, direction: Vec2| {
        planes.push(HalfPlane {
            point,
            normal: direction.perp_ccw().normalized(),
        });
    };

    if s < 0.0 && dist_sq1 <= radius_sq {
        // Collision with the left endpoint.
        push(
            planes,
            Vec2::ZERO,
            relative_position1.perp_ccw().normalized(),
        );
        return;
    }
    if s > 1.0 && dist_sq2 <= radius_sq {
        // Collision with the right endpoint.
        push(
            planes,
            Vec2::ZERO,
            relative_position2.perp_ccw().normalized(),
        );
        return;
    }
    if (0.0..=1.0).contains(&s) && dist_sq_line <= radius_sq {
        // Collision with the segment interior.
        push(planes, Vec2::ZERO, -obstacle_vector.normalized());
        return;
    }

    // No collision: build the truncated cone and project the current
    // velocity onto its boundary.
    let (cut1, cut2, left_leg_direction, right_leg_direction);
    if s < 0.0 && dist_sq_line <= radius_sq {
        // Viewed obliquely past the left endpoint: it defines the cone alone.
        let leg1 = (dist_sq1 - radius_sq).sqrt();
        cut1 = relative_position1;
        cut2 = relative_position1;
        left_leg_direction = vec2(
            relative_position1.x * leg1 - relative_position1.y * radius,
            relative_position1.x * radius + relative_position1.y * leg1,
        ) / dist_sq1;
        right_leg_direction = vec2(
            relative_position1.x * leg1 + relative_position1.y * radius,
            -relative_position1.x * radius + relative_position1.y * leg1,
        ) / dist_sq1;
    } else if s > 1.0 && dist_sq_line <= radius_sq {
        // Viewed obliquely past the right endpoint.
        let leg2 = (dist_sq2 - radius_sq).sqrt();
        cut1 = relative_position2;
        cut2 = relative_position2;
        left_leg_direction = vec2(
            relative_position2.x * leg2 - relative_position2.y * radius,
            relative_position2.x * radius + relative_position2.y * leg2,
        ) / dist_sq2;
        right_leg_direction = vec2(
            relative_position2.x * leg2 + relative_position2.y * radius,
            -relative_position2.x * radius + relative_position2.y * leg2,
        ) / dist_sq2;
    } else {
        let leg1 = (dist_sq1 - radius_sq).max(0.0).sqrt();
        let leg2 = (dist_sq2 - radius_sq).max(0.0).sqrt();
        cut1 = relative_position1;
        cut2 = if is_point {
            relative_position1
        } else {
            relative_position2
        };
        left_leg_direction = vec2(
            relative_position1.x * leg1 - relative_position1.y * radius,
            relative_position1.x * radius + relative_position1.y * leg1,
        ) / dist_sq1;
        right_leg_direction = vec2(
            relative_position2.x * leg2 + relative_position2.y * radius,
            -relative_position2.x * radius + relative_position2.y * leg2,
        ) / dist_sq2;
    }

    let left_cutoff = inv_tau * cut1;
    let right_cutoff = inv_tau * cut2;
    let cutoff_vec = right_cutoff - left_cutoff;
    let single = (cut1 - cut2).norm_sq() < EPS;

    let velocity = agent.velocity;
    let t = if single {
        0.5
    } else {
        (velocity - left_cutoff).dot(cutoff_vec) / cutoff_vec.norm_sq()
    };
    let t_left = (velocity - left_cutoff).dot(left_leg_direction);
    let t_right = (velocity - right_cutoff).dot(right_leg_direction);

    if (t < 0.0 && t_left < 0.0) || (single && t_left < 0.0 && t_right < 0.0) {
        // Project on the left cutoff circle.
        let unit_w = (velocity - left_cutoff).normalized();
        push(
            planes,
            left_cutoff + radius * inv_tau * unit_w,
            unit_w.perp_cw(),
        );
        return;
    }
    if t > 1.0 && t_right < 0.0 {
        // Project on the right cutoff circle.
        let unit_w = (velocity - right_cutoff).normalized();
        push(
            planes,
            right_cutoff + radius * inv_tau * unit_w,
            unit_w.perp_cw(),
        );
        return;
    }

    let dist_sq_cutoff = if t < 0.0 || t > 1.0 || single {
        f64::INFINITY
    } else {
        (velocity - (left_cutoff + t * cutoff_vec)).norm_sq()
    };
    let dist_sq_left = if t_left < 0.0 {
        f64::INFINITY
    } else {
        (velocity - (left_cutoff + t_left * left_leg_direction)).norm_sq()
    };
    let dist_sq_right = if t_right < 0.0 {
        f64::INFINITY
    } else {
        (velocity - (right_cutoff + t_right * right_leg_direction)).norm_sq()
    };

    if dist_sq_cutoff <= dist_sq_left && dist_sq_cutoff <= dist_sq_right {
        let direction = -obstacle_vector.normalized();
        push(
            planes,
            left_cutoff + radius * inv_tau * direction.perp_ccw(),
            direction,
        );
    } else if dist_sq_left <= dist_sq_right {
        let direction = left_leg_direction;
        push(
            planes,
            left_cutoff + radius * inv_tau * direction.perp_ccw(),
            direction,
        );
    } else {
        let direction = -right_leg_direction;
        push(
            planes,
            right_cutoff + radius * inv_tau * direction.perp_ccw(),
            direction,
        );
    }
}

/// Constraint set for one agent: obstacle planes first (fixed), then one
/// plane per neighbor in ascending id order.
pub fn agent_constraints(
    agent: &Agent,
    agents: &[Agent],
    obstacles: &[Obstacle],
    params: &OrcaParams,
    dt: f64,
) -> (Vec<HalfPlane>, usize) {
    let mut planes = Vec::new();
    let range = params.neighbor_dist;

    for obstacle in obstacles {
        for (p1, p2) in obstacle.segments() {
            if segment_distance(agent.position, p1, p2) < range {
                push_segment_planes(&mut planes, agent, p1, p2, params.tau_obst);
            }
        }
    }
    let num_fixed = planes.len();

    for other in agents {
        if other.id == agent.id {
            continue;
        }
        if (other.position - agent.position).norm() < range {
            planes.push(agent_plane(agent, other, params.tau, dt));
        }
    }
    (planes, num_fixed)
}

/// One simulation step: new velocities for all agents. Does not integrate
/// positions. Agents are processed in id order against the same snapshot.
pub fn orca_step(
    agents: &[Agent],
    obstacles: &[Obstacle],
    params: &OrcaParams,
    dt: f64,
) -> Result<Vec<Vec2>> {
    for agent in agents {
        if !agent.position.is_finite() || !agent.velocity.is_finite() {
            return Err(Error::CorruptState(format!(
                "non-finite state for agent {}",
                agent.id
            )));
        }
    }
    let mut velocities = Vec::with_capacity(agents.len());
    for agent in agents {
        let v_pref = preferred_velocity(agent, dt, params.goal_tolerance);
        let (planes, num_fixed) = agent_constraints(agent, agents, obstacles, params, dt);
        let v = solve_velocity_lp_fixed(&planes, num_fixed, v_pref, agent.max_speed);
        velocities.push(v);
    }
    Ok(velocities)
}

pub(crate) fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq < EPS {
        return (p - a).norm();
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    (p - (a + t * ab)).norm()
}
