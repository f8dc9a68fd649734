//! Agent-centric driving scenes: synthetic generation, frame normalization
//! and a line-delimited JSON file format.

mod frame;
mod io;
mod synth;

pub use frame::{to_agent_frame, to_world_frame, wrap_angle};
pub use io::{read_scenes, write_scenes};
pub use synth::{generate_dataset, generate_scene, path_pose, Intent, KinematicProfile, PathSegment, ProfileMix};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Sampling interval between timesteps, seconds.
pub const DT: f64 = 0.1;

/// Agent history features: x, y, heading, v_x, v_y, valid, normalized time.
pub const AGENT_FEATS: usize = 7;
pub const LANE_TYPES: usize = 3;
/// Lane node features: x, y, dir_x, dir_y, lane-type one-hot, valid.
pub const LANE_FEATS: usize = 4 + LANE_TYPES + 1;
pub const LIGHT_STATES: usize = 3;
/// Traffic light features: x, y, state one-hot, valid.
pub const LIGHT_FEATS: usize = 2 + LIGHT_STATES + 1;
/// Ground-truth future: x, y, heading, v_x, v_y.
pub const FUTURE_FEATS: usize = 5;

pub const AGENT_VALID: usize = 5;
pub const AGENT_TIME: usize = 6;
pub const LANE_VALID: usize = LANE_FEATS - 1;
pub const LIGHT_VALID: usize = LIGHT_FEATS - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// History steps `T_s`.
    pub t_hist: usize,
    /// Future steps `T_f`.
    pub t_fut: usize,
    /// Neighbor slots `N_a`.
    pub n_agents: usize,
    /// Lane polylines `N_m`.
    pub n_lanes: usize,
    /// Nodes per polyline `P`.
    pub lane_nodes: usize,
    /// Traffic lights `N_tl`.
    pub n_lights: usize,
}

impl Dims {
    /// Desk-scale defaults.
    pub const DESK: Dims = Dims { t_hist: 10, t_fut: 30, n_agents: 4, n_lanes: 16, lane_nodes: 8, n_lights: 1 };

    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.t_hist, self.t_fut, self.n_agents, self.n_lanes, self.lane_nodes, self.n_lights];
        if all.iter().any(|&d| d == 0) {
            return Err(crate::Error::invalid(format!("all scene dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self::DESK
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    #[default]
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    pub fn index(self) -> usize {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Pedestrian => 1,
            AgentType::Cyclist => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// One driving sample. Multi-dimensional arrays are stored flattened with
/// the leading axes folded into rows, e.g. neighbor histories are
/// `[(N_a · T_s) × AGENT_FEATS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub dims: Dims,
    /// `[T_s × AGENT_FEATS]`
    pub target_history: Tensor,
    /// `[(N_a · T_s) × AGENT_FEATS]`
    pub neighbor_histories: Tensor,
    /// `[(N_m · P) × LANE_FEATS]`
    pub lane_polylines: Tensor,
    /// `[(N_tl · T_s) × LIGHT_FEATS]`
    pub traffic_lights: Tensor,
    /// `[T_f × FUTURE_FEATS]`
    pub target_future: Tensor,
    /// `[(N_a · T_f) × 2]`
    pub neighbor_futures: Tensor,
    /// `[N_a · T_f]`
    pub neighbor_future_valid: Vec<bool>,
    pub agent_type: AgentType,
    /// Target pose at the last observed step in the original frame.
    pub frame_pose: Pose,
}

impl Scene {
    pub fn neighbor_valid(&self, a: usize) -> bool {
        let t = self.dims.t_hist;
        (0..t).any(|s| self.neighbor_histories.get(a * t + s, AGENT_VALID) > 0.5)
    }

    pub fn lane_valid(&self, l: usize) -> bool {
        let p = self.dims.lane_nodes;
        (0..p).any(|s| self.lane_polylines.get(l * p + s, LANE_VALID) > 0.5)
    }

    pub fn light_valid(&self, l: usize) -> bool {
        let t = self.dims.t_hist;
        (0..t).any(|s| self.traffic_lights.get(l * t + s, LIGHT_VALID) > 0.5)
    }

    /// Future target positions `[T_f × 2]`.
    pub fn future_positions(&self) -> Tensor {
        let t = self.dims.t_fut;
        let mut out = Tensor::zeros(t, 2);
        for s in 0..t {
            out.set(s, 0, self.target_future.get(s, 0));
            out.set(s, 1, self.target_future.get(s, 1));
        }
        out
    }

    pub fn future_endpoint(&self) -> [f64; 2] {
        let last = self.dims.t_fut - 1;
        [self.target_future.get(last, 0), self.target_future.get(last, 1)]
    }

    /// Last observed target state `(x, y, heading, speed)`.
    pub fn last_observed(&self) -> (f64, f64, f64, f64) {
        let r = self.target_history.row(self.dims.t_hist - 1);
        (r[0], r[1], r[2], r[3].hypot(r[4]))
    }

    /// Checks array shapes against `dims` and the validity-flag invariant.
    pub fn check_consistency(&self) -> crate::Result<()> {
        let d = &self.dims;
        d.validate()?;
        let expect = [
            ("target_history", &self.target_history, (d.t_hist, AGENT_FEATS)),
            ("neighbor_histories", &self.neighbor_histories, (d.n_agents * d.t_hist, AGENT_FEATS)),
            ("lane_polylines", &self.lane_polylines, (d.n_lanes * d.lane_nodes, LANE_FEATS)),
            ("traffic_lights", &self.traffic_lights, (d.n_lights * d.t_hist, LIGHT_FEATS)),
            ("target_future", &self.target_future, (d.t_fut, FUTURE_FEATS)),
            ("neighbor_futures", &self.neighbor_futures, (d.n_agents * d.t_fut, 2)),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(crate::Error::Format(format!("{name} has shape {:?}, expected {:?}", t.shape(), shape)));
            }
            if !t.is_finite() {
                return Err(crate::Error::Format(format!("{name} contains non-finite values")));
            }
        }
        if self.neighbor_future_valid.len() != d.n_agents * d.t_fut {
            return Err(crate::Error::Format("neighbor_future_valid length".into()));
        }
        for (t, col) in [
            (&self.target_history, AGENT_VALID),
            (&self.neighbor_histories, AGENT_VALID),
            (&self.lane_polylines, LANE_VALID),
            (&self.traffic_lights, LIGHT_VALID),
        ] {
            for r in 0..t.rows() {
                let v = t.get(r, col);
                if v != 0.0 && v != 1.0 {
                    return Err(crate::Error::Format(format!("valid flag {v} is not 0 or 1")));
                }
            }
        }
        Ok(())
    }
}
