//! Incremental 2D linear programming over half-plane constraints in
//! velocity space, with the standard third-stage fallback that minimizes
//! the maximum constraint violation when the program is infeasible.

use crate::vec2::Vec2;

/// A half-plane constraint in velocity space. Feasible velocities satisfy
/// `(v - point) · normal >= 0`.
#[derive(Debug, Clone, Copy)]
pub struct HalfPlane {
    pub point: Vec2,
    pub normal: Vec2,
}

impl HalfPlane {
    /// `normal` must be unit length to within 1e-9.
    pub fn new(point: Vec2, normal: Vec2) -> HalfPlane {
        assert!(
            (normal.norm() - 1.0).abs() <= 1e-9,
            "half-plane normal must be unit, got norm {}",
            normal.norm()
        );
        HalfPlane { point, normal }
    }

    /// Positive when `v` is infeasible; the signed violation depth.
    pub fn violation(&self, v: Vec2) -> f64 {
        -(v - self.point).dot(self.normal)
    }

    /// Boundary direction: the feasible side lies to its left.
    fn direction(&self) -> Vec2 {
        self.normal.perp_cw()
    }
}

const LP_EPSILON: f64 = 1e-9;

/// Returns the velocity of norm <= `v_max` closest to `v_pref` subject to
/// all half-planes when feasible; otherwise the velocity minimizing the
/// maximum constraint violation. Always yields a finite value.
pub fn solve_velocity_lp(planes: &[HalfPlane], v_pref: Vec2, v_max: f64) -> Vec2 {
    solve_velocity_lp_fixed(planes, 0, v_pref, v_max)
}

/// Like [`solve_velocity_lp`], but the first `num_fixed` planes are hard
/// constraints that the infeasibility fallback never relaxes (used for
/// static-obstacle constraints).
pub fn solve_velocity_lp_fixed(
    planes: &[HalfPlane],
    num_fixed: usize,
    v_pref: Vec2,
    v_max: f64,
) -> Vec2 {
    let (mut result, fail) = lp2(planes, v_max, v_pref, false);
    if let Some(begin) = fail {
        lp3(planes, num_fixed, begin, v_max, &mut result);
    }
    result
}

/// Optimizes along the boundary of plane `i`, subject to planes `0..i` and
/// the disk of radius `radius`. Returns None when that segment is empty.
fn lp1(planes: &[HalfPlane], i: usize, radius: f64, opt: Vec2, direction_opt: bool) -> Option<Vec2> {
    let dir = planes[i].direction();
    let pt = planes[i].point;
    let dot = pt.dot(dir);
    let discriminant = dot * dot + radius * radius - pt.norm_sq();
    if discriminant < 0.0 {
        // The boundary line misses the disk entirely.
        return None;
    }
    let sqrt_d = discriminant.sqrt();
    let mut t_left = -dot - sqrt_d;
    let mut t_right = -dot + sqrt_d;

    for other in &planes[..i] {
        let odir = other.direction();
        let denominator = dir.det(odir);
        let numerator = odir.det(pt - other.point);
        if denominator.abs() <= LP_EPSILON {
            // Parallel boundaries: either redundant or contradictory.
            if numerator < 0.0 {
                return None;
            }
            continue;
        }
        let t = numerator / denominator;
        if denominator >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return None;
        }
    }

    let t = if direction_opt {
        // `opt` is a direction; take the extreme point along it.
        if opt.dot(dir) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        dir.dot(opt - pt).clamp(t_left, t_right)
    };
    Some(pt + t * dir)
}

/// Sequentially satisfies each plane; on failure returns the index of the
/// first plane for which no feasible point exists.
fn lp2(planes: &[HalfPlane], radius: f64, opt: Vec2, direction_opt: bool) -> (Vec2, Option<usize>) {
    let mut result = if direction_opt {
        // `opt` is a unit direction.
        opt * radius
    } else if opt.norm_sq() > radius * radius {
        opt.normalized() * radius
    } else {
        opt
    };

    for (i, plane) in planes.iter().enumerate() {
        if plane.violation(result) > 0.0 {
            match lp1(planes, i, radius, opt, direction_opt) {
                Some(v) => result = v,
                None => return (result, Some(i)),
            }
        }
    }
    (result, None)
}

/// Third stage: progressively relaxes the planes from `begin` on (never the
/// first `num_fixed`) so the result minimizes the maximum violation depth.
fn lp3(planes: &[HalfPlane], num_fixed: usize, begin: usize, radius: f64, result: &mut Vec2) {
    let mut distance = 0.0;
    for i in begin..planes.len() {
        if planes[i].violation(*result) <= distance {
            continue;
        }
        let dir_i = planes[i].direction();
        let mut proj: Vec<HalfPlane> = planes[..num_fixed].to_vec();
        for j in num_fixed..i {
            let dir_j = planes[j].direction();
            let determinant = dir_i.det(dir_j);
            let point = if determinant.abs() <= LP_EPSILON {
                if dir_i.dot(dir_j) > 0.0 {
                    // Same direction: plane j is redundant against i.
                    continue;
                }
                0.5 * (planes[i].point + planes[j].point)
            } else {
                planes[i].point + (dir_j.det(planes[i].point - planes[j].point) / determinant) * dir_i
            };
            let direction = (dir_j - dir_i).normalized();
            proj.push(HalfPlane {
                point,
                normal: direction.perp_ccw(),
            });
        }

        let temp = *result;
        let (v, fail) = lp2(&proj, radius, planes[i].normal, true);
        if fail.is_none() {
            *result = v;
        } else {
            // Only possible due to rounding; keep the previous value.
            *result = temp;
        }
        distance = planes[i].violation(*result);
    }
}
