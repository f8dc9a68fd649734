use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    to_agent_frame, AgentType, Dims, Pose, Scene, AGENT_FEATS, DT, FUTURE_FEATS, LANE_FEATS, LIGHT_FEATS,
};
use crate::error::{Error, Result};
use crate::params::fnv1a;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    LeftTurn,
    Straight,
    RightTurn,
    Stop,
    LaneChange,
}

impl Intent {
    pub const ALL: [Intent; 5] = [Intent::LeftTurn, Intent::Straight, Intent::RightTurn, Intent::Stop, Intent::LaneChange];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicProfile {
    pub intent: Intent,
    /// m/s
    pub speed_range: (f64, f64),
    /// m
    pub turn_radius_range: (f64, f64),
    /// Positional noise standard deviation, m.
    pub noise_std: f64,
    #[serde(default)]
    pub agent_type: AgentType,
}

impl KinematicProfile {
    pub fn new(intent: Intent, speed: (f64, f64), radius: (f64, f64), noise_std: f64) -> Self {
        Self { intent, speed_range: speed, turn_radius_range: radius, noise_std, agent_type: AgentType::Vehicle }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.speed_range;
        let (r0, r1) = self.turn_radius_range;
        if !(s0 >= 0.0 && s1 >= s0) {
            return Err(Error::invalid(format!("bad speed range {:?}", self.speed_range)));
        }
        if !(r0 > 0.0 && r1 >= r0) {
            return Err(Error::invalid(format!("bad turn radius range {:?}", self.turn_radius_range)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid(format!("bad noise std {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Weighted list of profiles; probabilities must sum to one.
pub type ProfileMix = Vec<(KinematicProfile, f64)>;

fn validate_mix(mix: &[(KinematicProfile, f64)]) -> Result<()> {
    if mix.is_empty() {
        return Err(Error::invalid("profile mix is empty"));
    }
    let mut total = 0.0;
    for (p, w) in mix {
        p.validate()?;
        if !(*w >= 0.0) {
            return Err(Error::invalid(format!("negative probability {w}")));
        }
        total += w;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("profile probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn sample_profile<'m>(mix: &'m [(KinematicProfile, f64)], rng: &mut impl Rng) -> &'m KinematicProfile {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (p, w) in mix {
        acc += w;
        if u < acc {
            return p;
        }
    }
    &mix.last().expect("non-empty mix").0
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Constant-curvature piece of a path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSegment {
    pub length: f64,
    pub curvature: f64,
}

/// Pose `(x, y, heading)` at arclength `s` along a chain of arcs starting at
/// the origin with zero heading. Negative `s` and `s` past the end extend
/// the path straight.
pub fn path_pose(segments: &[PathSegment], s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (s, 0.0, 0.0);
    }
    let (mut x, mut y, mut h) = (0.0f64, 0.0f64, 0.0f64);
    let mut left = s;
    for seg in segments {
        let l = left.min(seg.length);
        let k = seg.curvature;
        if k.abs() < 1e-12 {
            x += l * h.cos();
            y += l * h.sin();
        } else {
            x += ((h + k * l).sin() - h.sin()) / k;
            y += (h.cos() - (h + k * l).cos()) / k;
            h += k * l;
        }
        left -= l;
        if left <= 0.0 {
            return (x, y, h);
        }
    }
    (x + left * h.cos(), y + left * h.sin(), h)
}

const LANE_WIDTH: f64 = 3.5;

fn maneuver_path(intent: Intent, radius: f64) -> Vec<PathSegment> {
    match intent {
        Intent::Straight | Intent::Stop => vec![],
        Intent::LeftTurn => vec![PathSegment { length: radius * PI / 2.0, curvature: 1.0 / radius }],
        Intent::RightTurn => vec![PathSegment { length: radius * PI / 2.0, curvature: -1.0 / radius }],
        Intent::LaneChange => {
            let r = radius.max(LANE_WIDTH);
            let theta = (1.0 - LANE_WIDTH / (2.0 * r)).acos();
            vec![
                PathSegment { length: r * theta, curvature: 1.0 / r },
                PathSegment { length: r * theta, curvature: -1.0 / r },
            ]
        }
    }
}

/// Local-frame motion of one agent: pose and speed at each requested time.
struct Motion {
    path: Vec<PathSegment>,
    speed: f64,
    /// Time at which a stopping agent reaches zero speed.
    stop_time: Option<f64>,
}

impl Motion {
    fn arclength(&self, t: f64) -> (f64, f64) {
        if t <= 0.0 {
            return (self.speed * t, self.speed);
        }
        match self.stop_time {
            Some(ts) => {
                let a = self.speed / ts;
                let tt = t.min(ts);
                (self.speed * tt - 0.5 * a * tt * tt, (self.speed - a * tt).max(0.0))
            }
            None => (self.speed * t, self.speed),
        }
    }

    /// `(x, y, heading, v_x, v_y)` at time `t` (0 = last observed step).
    fn state(&self, t: f64) -> [f64; 5] {
        let (s, v) = self.arclength(t);
        let (x, y, h) = path_pose(&self.path, s);
        [x, y, h, v * h.cos(), v * h.sin()]
    }
}

fn sample_motion(p: &KinematicProfile, horizon: f64, rng: &mut impl Rng) -> Motion {
    let speed = uniform(rng, p.speed_range);
    let radius = uniform(rng, p.turn_radius_range);
    let stop_time = (p.intent == Intent::Stop).then(|| horizon * rng.random_range(0.5..1.0));
    Motion { path: maneuver_path(p.intent, radius), speed, stop_time }
}

/// Rigid transform applied to local-frame points.
#[derive(Clone, Copy)]
struct Placement {
    x: f64,
    y: f64,
    yaw: f64,
}

impl Placement {
    fn point(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }

    fn dir(&self, dx: f64, dy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * dx - s * dy, s * dx + c * dy)
    }
}

fn write_agent_history(out: &mut Tensor, row0: usize, m: &Motion, place: Placement, dims: &Dims, first_valid: usize, noise: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let t_s = dims.t_hist;
    for k in 0..t_s {
        if k < first_valid {
            continue;
        }
        let t = -((t_s - 1 - k) as f64) * DT;
        let [x, y, h, vx, vy] = m.state(t);
        let (nx, ny) = if noise > 0.0 { (normal.sample(rng), normal.sample(rng)) } else { (0.0, 0.0) };
        let (wx, wy) = place.point(x + nx, y + ny);
        let (wvx, wvy) = place.dir(vx, vy);
        let time = if t_s > 1 { k as f64 / (t_s - 1) as f64 } else { 1.0 };
        out.row_mut(row0 + k).copy_from_slice(&[wx, wy, h + place.yaw, wvx, wvy, 1.0, time]);
    }
}

fn write_lane(out: &mut Tensor, lane: usize, dims: &Dims, path: &[PathSegment], place: Placement, s0: f64, s1: f64, kind: usize) {
    let p = dims.lane_nodes;
    for n in 0..p {
        let s = if p > 1 { s0 + (s1 - s0) * n as f64 / (p - 1) as f64 } else { s0 };
        let (x, y, h) = path_pose(path, s);
        let (wx, wy) = place.point(x, y);
        let (dx, dy) = place.dir(h.cos(), h.sin());
        let row = out.row_mut(lane * p + n);
        row.fill(0.0);
        row[0] = wx;
        row[1] = wy;
        row[2] = dx;
        row[3] = dy;
        row[4 + kind] = 1.0;
        row[LANE_FEATS - 1] = 1.0;
    }
}

fn default_radius(intent: Intent, mix: &[(KinematicProfile, f64)], rng: &mut impl Rng) -> f64 {
    mix.iter()
        .find(|(p, _)| p.intent == intent)
        .map(|(p, _)| uniform(rng, p.turn_radius_range))
        .unwrap_or(match intent {
            Intent::LeftTurn => 20.0,
            Intent::RightTurn => 12.0,
            _ => 40.0,
        })
}

/// Deterministic synthetic scene, returned in the target's agent frame with
/// the sampled world pose kept in `frame_pose`.
pub fn generate_scene(seed: u64, profile_mix: &[(KinematicProfile, f64)], dims: Dims) -> Result<Scene> {
    validate_mix(profile_mix)?;
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = dims.t_fut as f64 * DT;

    let world = Placement {
        x: rng.random_range(-100.0..100.0),
        y: rng.random_range(-100.0..100.0),
        yaw: rng.random_range(-PI..PI),
    };

    let profile = sample_profile(profile_mix, &mut rng).clone();
    let motion = sample_motion(&profile, horizon, &mut rng);

    // Target history and future in world coordinates.
    let mut target_history = Tensor::zeros(dims.t_hist, AGENT_FEATS);
    write_agent_history(&mut target_history, 0, &motion, world, &dims, 0, profile.noise_std, &mut rng);
    let normal = Normal::new(0.0, profile.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut target_future = Tensor::zeros(dims.t_fut, FUTURE_FEATS);
    for k in 0..dims.t_fut {
        let [x, y, h, vx, vy] = motion.state((k + 1) as f64 * DT);
        let (nx, ny) = if profile.noise_std > 0.0 { (normal.sample(&mut rng), normal.sample(&mut rng)) } else { (0.0, 0.0) };
        let (wx, wy) = world.point(x + nx, y + ny);
        let (wvx, wvy) = world.dir(vx, vy);
        target_future.row_mut(k).copy_from_slice(&[wx, wy, h + world.yaw, wvx, wvy]);
    }

    // Neighbors with independent profiles.
    let mut neighbor_histories = Tensor::zeros(dims.n_agents * dims.t_hist, AGENT_FEATS);
    let mut neighbor_futures = Tensor::zeros(dims.n_agents * dims.t_fut, 2);
    let mut neighbor_future_valid = vec![false; dims.n_agents * dims.t_fut];
    for a in 0..dims.n_agents {
        if rng.random::<f64>() >= 0.75 {
            continue;
        }
        let np = sample_profile(profile_mix, &mut rng).clone();
        let nm = sample_motion(&np, horizon, &mut rng);
        let lane = [-1.0, 0.0, 1.0, 2.0][rng.random_range(0..4)];
        let oncoming = lane == 2.0;
        let lon = rng.random_range(-30.0..40.0);
        let local = Placement {
            x: lon,
            y: lane * LANE_WIDTH,
            yaw: if oncoming { PI } else { 0.0 } + rng.random_range(-0.05..0.05),
        };
        let place = Placement {
            x: world.point(local.x, local.y).0,
            y: world.point(local.x, local.y).1,
            yaw: world.yaw + local.yaw,
        };
        let first_valid = if rng.random::<f64>() < 0.2 { rng.random_range(1..dims.t_hist.max(2)) } else { 0 };
        write_agent_history(&mut neighbor_histories, a * dims.t_hist, &nm, place, &dims, first_valid, np.noise_std, &mut rng);
        for k in 0..dims.t_fut {
            let [x, y, ..] = nm.state((k + 1) as f64 * DT);
            let (wx, wy) = place.point(x, y);
            neighbor_futures.row_mut(a * dims.t_fut + k).copy_from_slice(&[wx, wy]);
            neighbor_future_valid[a * dims.t_fut + k] = true;
        }
    }

    // Lanes: the intended maneuver, optional alternative maneuvers, then
    // parallel and oncoming distractors.
    let mut lane_polylines = Tensor::zeros(dims.n_lanes * dims.lane_nodes, LANE_FEATS);
    let mut lanes: Vec<(Vec<PathSegment>, Placement, usize)> = Vec::new();
    let own = Placement { x: world.x, y: world.y, yaw: world.yaw };
    let intended = match profile.intent {
        Intent::LaneChange => Intent::Straight,
        i => i,
    };
    lanes.push((motion.path.clone(), own, lane_kind(profile.intent)));
    for alt in [Intent::LeftTurn, Intent::Straight, Intent::RightTurn] {
        if alt == intended || rng.random::<f64>() >= 0.6 {
            continue;
        }
        let r = default_radius(alt, profile_mix, &mut rng);
        lanes.push((maneuver_path(alt, r), own, lane_kind(alt)));
    }
    if profile.intent == Intent::LaneChange {
        lanes.push((vec![], own, lane_kind(Intent::Straight)));
    }
    for (lat, flip) in [(1.0, false), (-1.0, false), (2.0, true)] {
        if rng.random::<f64>() < 0.5 {
            let (px, py) = world.point(0.0, lat * LANE_WIDTH);
            let yaw = world.yaw + if flip { PI } else { 0.0 };
            lanes.push((vec![], Placement { x: px, y: py, yaw }, 2));
        }
    }
    for (l, (path, place, kind)) in lanes.iter().take(dims.n_lanes).enumerate() {
        let (s0, s1) = if place.yaw == world.yaw + PI { (-40.0, 20.0) } else { (-20.0, 40.0) };
        write_lane(&mut lane_polylines, l, &dims, path, *place, s0, s1, *kind);
    }

    // Traffic lights ahead of the target; red when it is about to stop.
    let mut traffic_lights = Tensor::zeros(dims.n_lights * dims.t_hist, LIGHT_FEATS);
    for l in 0..dims.n_lights {
        let state = match profile.intent {
            Intent::Stop => 0,
            _ if rng.random::<f64>() < 0.1 => 1,
            _ => 2,
        };
        let (px, py) = world.point(15.0 + 10.0 * l as f64, -LANE_WIDTH);
        for k in 0..dims.t_hist {
            let row = traffic_lights.row_mut(l * dims.t_hist + k);
            row[0] = px;
            row[1] = py;
            row[2 + state] = 1.0;
            row[LIGHT_FEATS - 1] = 1.0;
        }
    }

    let last = target_history.row(dims.t_hist - 1);
    let frame_pose = Pose { x: last[0], y: last[1], yaw: last[2] };
    let scene = Scene {
        dims,
        target_history,
        neighbor_histories,
        lane_polylines,
        traffic_lights,
        target_future,
        neighbor_futures,
        neighbor_future_valid,
        agent_type: profile.agent_type,
        frame_pose,
    };
    to_agent_frame(&scene)
}

fn lane_kind(intent: Intent) -> usize {
    match intent {
        Intent::Straight | Intent::Stop => 0,
        Intent::LeftTurn | Intent::RightTurn => 1,
        Intent::LaneChange => 2,
    }
}

/// `n` scenes with per-index seeds derived from `seed`, generated in parallel.
pub fn generate_dataset(seed: u64, n: usize, profile_mix: &[(KinematicProfile, f64)], dims: Dims) -> Result<Vec<Scene>> {
    validate_mix(profile_mix)?;
    let base = seed ^ fnv1a(b"scene");
    crate::par::map_indexed(n, |i| generate_scene(base.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)), profile_mix, dims))
        .into_iter()
        .collect()
}
