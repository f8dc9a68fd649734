//! PointNet-style per-modality encoders with pose reprojection.
//!
//! Each modality runs two per-element MLP blocks. The first block's masked
//! max-pool is broadcast back onto every element before the second block,
//! whose pooled output is the element token. The target history also keeps
//! its per-timestep features for the retrieval layer.

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::scene::{Scene, AGENT_FEATS, AGENT_VALID, LANE_FEATS, LANE_VALID, LIGHT_FEATS, LIGHT_VALID};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Positions and velocities are divided by this before the MLPs.
pub const INPUT_SCALE: f64 = 10.0;
/// Pose features use positions divided by this.
pub const POSE_SCALE: f64 = 50.0;
pub const AGENT_POSE_DIM: usize = 3;
pub const LANE_POSE_DIM: usize = 4;

#[derive(Clone, Debug)]
pub struct PointNet {
    pub block1: Mlp,
    pub block2: Mlp,
    pub width: usize,
}

/// Output of [`PointNet::encode_sets`].
pub struct Encoded {
    /// `[n_sets × D]`; all-zero rows for empty sets.
    pub pooled: Var,
    /// `[L_total × D]` second-block features before the final pool.
    pub dense: Var,
}

impl PointNet {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize) -> Self {
        Self {
            block1: Mlp::new(store, &format!("{name}.block1"), &[d_in, d, d]),
            block2: Mlp::new(store, &format!("{name}.block2"), &[2 * d, d, d]),
            width: d,
        }
    }

    /// Encodes `sets` consecutive row groups of `len` elements each.
    pub fn encode_sets<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var, sets: usize, len: usize, valid: &[bool]) -> Encoded {
        let segs: Vec<(usize, usize)> = (0..sets).map(|s| (s * len, len)).collect();
        let owner: Vec<usize> = (0..sets * len).map(|r| r / len).collect();
        let h1 = self.block1.forward_act(g, store, x);
        let p1 = g.segment_max(h1, &segs, valid);
        let back = g.gather_rows(p1, &owner);
        let cat = g.concat_cols(&[h1, back]);
        let dense = self.block2.forward_act(g, store, cat);
        let pooled = g.segment_max(dense, &segs, valid);
        Encoded { pooled, dense }
    }
}

/// Single-sequence encoder: returns the pooled `[1 × D]` feature and, when
/// `keep_dense` is set, the per-element `[L × D]` features.
pub fn pointnet_encode<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    net: &PointNet,
    seq: Var,
    valid: &[bool],
    keep_dense: bool,
) -> Result<(Var, Option<Var>)> {
    let l = g.shape(seq).0;
    if valid.len() != l {
        return Err(Error::invalid(format!("mask has {} entries for {l} elements", valid.len())));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::invalid("pointnet input has no valid element"));
    }
    let e = net.encode_sets(g, store, seq, 1, l, valid);
    Ok((e.pooled, keep_dense.then_some(e.dense)))
}

#[derive(Clone, Debug)]
pub struct PoseMlp {
    pub mlp: Mlp,
    pub g: usize,
}

impl PoseMlp {
    pub fn new(store: &mut ParamStore, name: &str, g: usize, d: usize) -> Self {
        Self { mlp: Mlp::new(store, name, &[g, d, d]), g }
    }
}

/// `features + PoseMLP(pose)` row-wise; `pose` is `[n × G]`.
pub fn pose_reproject<'a>(g: &mut Graph<'a>, store: &'a ParamStore, features: Var, pose: Var, p: &PoseMlp) -> Result<Var> {
    let (n, gdim) = g.shape(pose);
    if gdim != p.g {
        return Err(Error::invalid(format!("pose has {gdim} features, expected {}", p.g)));
    }
    if n != g.shape(features).0 {
        return Err(Error::invalid("pose and feature row counts differ"));
    }
    let add = p.mlp.forward(g, store, pose);
    Ok(g.add(features, add))
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub target: PointNet,
    pub neighbors: PointNet,
    pub lanes: PointNet,
    pub lights: PointNet,
    pub agent_pose: PoseMlp,
    pub lane_pose: PoseMlp,
}

/// Projected tokens of one scene, all of width `D`.
pub struct ProjectedScene {
    /// `[T_s × D]` per-timestep target features.
    pub target_dense: Var,
    /// `[1 × D]`
    pub target: Var,
    /// `[N_a × D]`
    pub neighbors: Var,
    pub neighbor_mask: Vec<bool>,
    /// `[N_m × D]`
    pub lanes: Var,
    pub lane_mask: Vec<bool>,
    /// `[N_tl × D]`
    pub lights: Var,
    pub light_mask: Vec<bool>,
}

/// Scaled per-element agent features.
fn agent_input(t: &Tensor) -> Tensor {
    let mut x = t.clone();
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        for c in [0, 1, 3, 4] {
            row[c] /= INPUT_SCALE;
        }
    }
    x
}

fn position_input(t: &Tensor) -> Tensor {
    let mut x = t.clone();
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        row[0] /= INPUT_SCALE;
        row[1] /= INPUT_SCALE;
    }
    x
}

/// `(x, y, heading)` of each agent at its last valid step, positions over
/// [`POSE_SCALE`].
fn agent_poses(hist: &Tensor, n: usize, t: usize) -> Tensor {
    let mut out = Tensor::zeros(n, AGENT_POSE_DIM);
    for a in 0..n {
        if let Some(s) = (0..t).rev().find(|&s| hist.get(a * t + s, AGENT_VALID) > 0.5) {
            let r = hist.row(a * t + s);
            out.row_mut(a).copy_from_slice(&[r[0] / POSE_SCALE, r[1] / POSE_SCALE, r[2]]);
        }
    }
    out
}

/// Normalized centroid and first-to-last unit direction of each lane.
pub fn lane_poses(lanes: &Tensor, n: usize, p: usize) -> Tensor {
    let mut out = Tensor::zeros(n, LANE_POSE_DIM);
    for l in 0..n {
        let nodes: Vec<&[f64]> = (0..p).map(|k| lanes.row(l * p + k)).filter(|r| r[LANE_VALID] > 0.5).collect();
        if nodes.is_empty() {
            continue;
        }
        let cnt = nodes.len() as f64;
        let cx = nodes.iter().map(|r| r[0]).sum::<f64>() / cnt;
        let cy = nodes.iter().map(|r| r[1]).sum::<f64>() / cnt;
        let (first, last) = (nodes[0], nodes[nodes.len() - 1]);
        let (dx, dy) = (last[0] - first[0], last[1] - first[1]);
        let len = dx.hypot(dy);
        let (ux, uy) = if len > 1e-9 { (dx / len, dy / len) } else { (first[2], first[3]) };
        out.row_mut(l).copy_from_slice(&[cx / POSE_SCALE, cy / POSE_SCALE, ux, uy]);
    }
    out
}

impl Projection {
    pub fn new(store: &mut ParamStore, d: usize) -> Self {
        Self {
            target: PointNet::new(store, "proj.target", AGENT_FEATS, d),
            neighbors: PointNet::new(store, "proj.neighbors", AGENT_FEATS, d),
            lanes: PointNet::new(store, "proj.lanes", LANE_FEATS, d),
            lights: PointNet::new(store, "proj.lights", LIGHT_FEATS, d),
            agent_pose: PoseMlp::new(store, "proj.agent_pose", AGENT_POSE_DIM, d),
            lane_pose: PoseMlp::new(store, "proj.lane_pose", LANE_POSE_DIM, d),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, scene: &Scene) -> Result<ProjectedScene> {
        let d = scene.dims;
        let col = |t: &Tensor, c: usize| -> Vec<bool> { (0..t.rows()).map(|r| t.get(r, c) > 0.5).collect() };

        let th = g.input(agent_input(&scene.target_history));
        let tmask = col(&scene.target_history, AGENT_VALID);
        let (target, dense) = pointnet_encode(g, store, &self.target, th, &tmask, true)
            .map_err(|_| Error::invalid("target agent has no valid history step"))?;
        let tpose = g.input(agent_poses(&scene.target_history, 1, d.t_hist));
        let target = pose_reproject(g, store, target, tpose, &self.agent_pose)?;

        let nh = g.input(agent_input(&scene.neighbor_histories));
        let nvalid = col(&scene.neighbor_histories, AGENT_VALID);
        let neighbors = self.neighbors.encode_sets(g, store, nh, d.n_agents, d.t_hist, &nvalid).pooled;
        let npose = g.input(agent_poses(&scene.neighbor_histories, d.n_agents, d.t_hist));
        let neighbors = pose_reproject(g, store, neighbors, npose, &self.agent_pose)?;

        let lp = g.input(position_input(&scene.lane_polylines));
        let lvalid = col(&scene.lane_polylines, LANE_VALID);
        let lanes = self.lanes.encode_sets(g, store, lp, d.n_lanes, d.lane_nodes, &lvalid).pooled;
        let lpose = g.input(lane_poses(&scene.lane_polylines, d.n_lanes, d.lane_nodes));
        let lanes = pose_reproject(g, store, lanes, lpose, &self.lane_pose)?;

        let tl = g.input(position_input(&scene.traffic_lights));
        let tlvalid = col(&scene.traffic_lights, LIGHT_VALID);
        let lights = self.lights.encode_sets(g, store, tl, d.n_lights, d.t_hist, &tlvalid).pooled;

        Ok(ProjectedScene {
            target_dense: dense.expect("dense requested"),
            target,
            neighbors,
            neighbor_mask: (0..d.n_agents).map(|a| scene.neighbor_valid(a)).collect(),
            lanes,
            lane_mask: (0..d.n_lanes).map(|l| scene.lane_valid(l)).collect(),
            lights,
            light_mask: (0..d.n_lights).map(|l| scene.light_valid(l)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn encode(store: &ParamStore, net: &PointNet, x: &Tensor, valid: &[bool]) -> Tensor {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let (p, _) = pointnet_encode(&mut g, store, net, v, valid, false).unwrap();
        g.value(p).clone()
    }

    #[test]
    fn singleton_pool_is_the_element() {
        let mut store = ParamStore::new(3);
        let net = PointNet::new(&mut store, "p", 5, 8);
        let x = random(1, 5, 1);
        let mut g = Graph::new();
        let v = g.input(x);
        let (p, dense) = pointnet_encode(&mut g, &store, &net, v, &[true], true).unwrap();
        assert_eq!(g.value(p), g.value(dense.unwrap()));
    }

    #[test]
    fn pooled_is_permutation_invariant() {
        let mut store = ParamStore::new(4);
        let net = PointNet::new(&mut store, "p", LANE_FEATS, 16);
        let x = random(8, LANE_FEATS, 2);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let mut y = Tensor::zeros(8, LANE_FEATS);
        for (i, &j) in perm.iter().enumerate() {
            y.row_mut(i).copy_from_slice(x.row(j));
        }
        let a = encode(&store, &net, &x, &[true; 8]);
        let b = encode(&store, &net, &y, &[true; 8]);
        assert!(a.zip_map(&b, |p, q| (p - q).abs()).max_abs() < 1e-6);
    }

    #[test]
    fn masked_element_equals_removed_element() {
        let mut store = ParamStore::new(5);
        let net = PointNet::new(&mut store, "p", 4, 8);
        let mut x = random(5, 4, 3);
        x.row_mut(2).fill(1e6);
        let mask = [true, true, false, true, true];
        let a = encode(&store, &net, &x, &mask);
        let mut kept = Vec::new();
        for r in [0, 1, 3, 4] {
            kept.push(x.row(r).to_vec());
        }
        let b = encode(&store, &net, &Tensor::from_rows(&kept), &[true; 4]);
        assert!(a.zip_map(&b, |p, q| (p - q).abs()).max_abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_invalid() {
        let mut store = ParamStore::new(5);
        let net = PointNet::new(&mut store, "p", 4, 8);
        let mut g = Graph::new();
        let v = g.input(random(3, 4, 1));
        assert!(matches!(pointnet_encode(&mut g, &store, &net, v, &[false; 3], false), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pose_reprojection_is_additive() {
        let mut store = ParamStore::new(6);
        let pm = PoseMlp::new(&mut store, "pose", 3, 8);
        let (f, h) = (random(1, 8, 1), random(1, 8, 2));
        let pose = Tensor::row_vector(vec![0.2, -0.4, 0.3]);
        let mut g = Graph::new();
        let (fv, hv, pv) = (g.input(f.clone()), g.input(h.clone()), g.input(pose.clone()));
        let a = pose_reproject(&mut g, &store, fv, pv, &pm).unwrap();
        let b = pose_reproject(&mut g, &store, hv, pv, &pm).unwrap();
        let diff = g.value(a).zip_map(g.value(b), |x, y| x - y);
        assert!(diff.zip_map(&f.zip_map(&h, |x, y| x - y), |x, y| (x - y).abs()).max_abs() < 1e-15);

        let z = g.input(Tensor::zeros(1, 8));
        let c = pose_reproject(&mut g, &store, z, pv, &pm).unwrap();
        let direct = pm.mlp.forward(&mut g, &store, pv);
        assert_eq!(g.value(c), g.value(direct));

        let other = g.input(Tensor::row_vector(vec![-0.3, 0.1, 1.0]));
        let d = pose_reproject(&mut g, &store, z, other, &pm).unwrap();
        assert!(g.value(c).zip_map(g.value(d), |x, y| (x - y).abs()).max_abs() > 1e-3);

        let bad = g.input(Tensor::zeros(1, 4));
        assert!(pose_reproject(&mut g, &store, z, bad, &pm).is_err());
    }

    #[test]
    fn lane_pose_features() {
        let mut lanes = Tensor::zeros(3, LANE_FEATS);
        for (k, x) in [0.0, 50.0, 100.0].iter().enumerate() {
            lanes.row_mut(k)[0] = *x;
            lanes.row_mut(k)[1] = 25.0;
            lanes.row_mut(k)[LANE_VALID] = 1.0;
        }
        let p = lane_poses(&lanes, 1, 3);
        assert_eq!(p.row(0), &[1.0, 0.5, 1.0, 0.0]);
    }
}
