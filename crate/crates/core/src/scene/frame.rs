use std::f64::consts::PI;

use super::{Pose, Scene, AGENT_VALID, LANE_VALID, LIGHT_VALID};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

const CENTERED_TOL: f64 = 1e-9;

#[derive(Clone, Copy)]
struct Rigid {
    cos: f64,
    sin: f64,
    tx: f64,
    ty: f64,
    dyaw: f64,
}

impl Rigid {
    /// World → agent frame for a target at `pose`.
    fn into_agent(pose: Pose) -> Self {
        let (s, c) = pose.yaw.sin_cos();
        // p' = R(−yaw)(p − t)
        Self { cos: c, sin: -s, tx: -(c * pose.x + s * pose.y), ty: s * pose.x - c * pose.y, dyaw: -pose.yaw }
    }

    /// Agent → world frame.
    fn into_world(pose: Pose) -> Self {
        let (s, c) = pose.yaw.sin_cos();
        Self { cos: c, sin: s, tx: pose.x, ty: pose.y, dyaw: pose.yaw }
    }

    fn point(&self, x: f64, y: f64) -> (f64, f64) {
        (self.cos * x - self.sin * y + self.tx, self.sin * x + self.cos * y + self.ty)
    }

    fn dir(&self, x: f64, y: f64) -> (f64, f64) {
        (self.cos * x - self.sin * y, self.sin * x + self.cos * y)
    }
}

/// Transforms rows of `t`. `pos` and `dir` give column offsets of points and
/// direction vectors; `heading` a heading column. Rows whose validity column
/// is zero keep their zero padding.
fn apply(t: &mut Tensor, rt: Rigid, valid_col: Option<usize>, pos: usize, dir: Option<usize>, heading: Option<usize>, mask: Option<&[bool]>) {
    for r in 0..t.rows() {
        let keep = match (valid_col, mask) {
            (Some(c), _) => t.get(r, c) > 0.5,
            (None, Some(m)) => m[r],
            (None, None) => true,
        };
        if !keep {
            continue;
        }
        let row = t.row_mut(r);
        let (x, y) = rt.point(row[pos], row[pos + 1]);
        row[pos] = x;
        row[pos + 1] = y;
        if let Some(d) = dir {
            let (dx, dy) = rt.dir(row[d], row[d + 1]);
            row[d] = dx;
            row[d + 1] = dy;
        }
        if let Some(h) = heading {
            row[h] = wrap_angle(row[h] + rt.dyaw);
        }
    }
}

fn transform(scene: &Scene, rt: Rigid) -> Scene {
    let mut s = scene.clone();
    apply(&mut s.target_history, rt, Some(AGENT_VALID), 0, Some(3), Some(2), None);
    apply(&mut s.neighbor_histories, rt, Some(AGENT_VALID), 0, Some(3), Some(2), None);
    apply(&mut s.lane_polylines, rt, Some(LANE_VALID), 0, Some(2), None, None);
    apply(&mut s.traffic_lights, rt, Some(LIGHT_VALID), 0, None, None, None);
    apply(&mut s.target_future, rt, None, 0, Some(3), Some(2), None);
    let mask = scene.neighbor_future_valid.clone();
    apply(&mut s.neighbor_futures, rt, None, 0, None, None, Some(&mask));
    s
}

fn is_centered(scene: &Scene) -> bool {
    let (x, y, h, _) = scene.last_observed();
    x.abs() <= CENTERED_TOL && y.abs() <= CENTERED_TOL && h.abs() <= CENTERED_TOL
}

/// Rotates and translates the scene so the target's last observed pose is the
/// origin with zero heading. `frame_pose` is kept for de-normalization. A
/// scene that is already centered is returned unchanged, which makes the
/// operation idempotent.
pub fn to_agent_frame(scene: &Scene) -> Result<Scene> {
    let p = scene.frame_pose;
    if !(p.x.is_finite() && p.y.is_finite() && p.yaw.is_finite()) {
        return Err(Error::invalid(format!("non-finite frame pose {p:?}")));
    }
    if is_centered(scene) {
        return Ok(scene.clone());
    }
    Ok(transform(scene, Rigid::into_agent(p)))
}

/// Inverse of [`to_agent_frame`]: maps an agent-frame scene back to the
/// original frame recorded in `frame_pose`.
pub fn to_world_frame(scene: &Scene) -> Result<Scene> {
    let p = scene.frame_pose;
    if !(p.x.is_finite() && p.y.is_finite() && p.yaw.is_finite()) {
        return Err(Error::invalid(format!("non-finite frame pose {p:?}")));
    }
    Ok(transform(scene, Rigid::into_world(p)))
}
