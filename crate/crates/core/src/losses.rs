//! Training objective: winner-takes-all kinematic loss, soft-min endpoint
//! loss over refined anchors, latent diversity penalty and their weighted
//! total.

use serde::Serialize;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::heads::{kinematics, Kinematics};
use crate::scene::AgentType;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub struct MotionLoss {
    pub total: Var,
    pub nll: Var,
    pub vel: Var,
    pub yaw: Var,
    pub ce: Var,
    pub winner: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub motion: f64,
    pub nll: f64,
    pub vel: f64,
    pub yaw: f64,
    pub ce: f64,
    pub endpoint: f64,
    pub diversity: f64,
    pub entropy: f64,
    pub aux_neighbor: f64,
    pub offset: f64,
    pub winner: usize,
}

/// Mode with the smallest summed per-step displacement to `gt` (`[T_f × ≥2]`),
/// lowest index on ties. `mu` is `[K·T_f × 2]`.
pub fn winner_mode(mu: &Tensor, gt: &Tensor) -> usize {
    let t = gt.rows();
    let k = mu.rows() / t;
    let mut best = (0, f64::INFINITY);
    for m in 0..k {
        let d: f64 = (0..t).map(|s| (mu.get(m * t + s, 0) - gt.get(s, 0)).hypot(mu.get(m * t + s, 1) - gt.get(s, 1))).sum();
        if d < best.1 {
            best = (m, d);
        }
    }
    best.0
}

/// Per-step bivariate Gaussian negative log-likelihood `[T × 1]`.
pub fn gaussian_nll(g: &mut Graph<'_>, mu: Var, log_sigma: Var, rho: Var, target: Var) -> Var {
    let d = g.sub(mu, target);
    let inv = g.scale(log_sigma, -1.0);
    let inv = g.exp(inv);
    let z = g.mul(d, inv);
    let zx = g.slice_cols(z, 0, 1);
    let zy = g.slice_cols(z, 1, 1);
    let zx2 = g.square(zx);
    let zy2 = g.square(zy);
    let cross = g.mul(zx, zy);
    let cross = g.mul(cross, rho);
    let cross = g.scale(cross, -2.0);
    let quad = g.add(zx2, zy2);
    let quad = g.add(quad, cross);
    let r2 = g.square(rho);
    let r2 = g.scale(r2, -1.0);
    let one_m = g.add_const(r2, 1.0);
    let log_one_m = g.log(one_m);
    let inv_one_m = g.scale(log_one_m, -1.0);
    let inv_one_m = g.exp(inv_one_m);
    let mahal = g.mul(quad, inv_one_m);
    let mahal = g.scale(mahal, 0.5);
    let half_log = g.scale(log_one_m, 0.5);
    let ls = g.sum_cols(log_sigma);
    let norm = g.add(ls, half_log);
    let norm = g.add_const(norm, LN_2PI);
    g.add(norm, mahal)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite {what}")))
    }
}

/// `gt` is `[T_f × 5]`: x, y, heading, v_x, v_y.
pub fn wta_motion_loss(g: &mut Graph<'_>, kin: Var, conf_logits: Var, gt: &Tensor, cfg: &LossConfig, agent: AgentType) -> Result<MotionLoss> {
    check_finite(gt, "ground truth")?;
    let t = gt.rows();
    let Kinematics { mu, log_sigma, rho, speed, yaw } = kinematics(g, kin);
    let winner = winner_mode(g.value(mu), gt);
    let rows = |g: &mut Graph<'_>, v: Var| g.slice_rows(v, winner * t, t);
    let (mu, log_sigma, rho, speed, yaw) = (rows(g, mu), rows(g, log_sigma), rows(g, rho), rows(g, speed), rows(g, yaw));

    let pos = g.input(Tensor::from_vec(t, 2, (0..t).flat_map(|s| [gt.get(s, 0), gt.get(s, 1)]).collect()));
    let nll = gaussian_nll(g, mu, log_sigma, rho, pos);
    let nll = g.mean_all(nll);

    let v_gt = g.input(Tensor::from_vec(t, 1, (0..t).map(|s| gt.get(s, 3).hypot(gt.get(s, 4))).collect()));
    let dv = g.sub(speed, v_gt);
    let hv = g.huber(dv, cfg.huber_delta);
    let vel = g.mean_all(hv);

    let yaw_gt = g.input(Tensor::from_vec(t, 1, (0..t).map(|s| gt.get(s, 2)).collect()));
    let dy = g.sub(yaw, yaw_gt);
    let c = g.cos(dy);
    let c = g.scale(c, -1.0);
    let c = g.add_const(c, 1.0);
    let yaw = g.mean_all(c);

    let lp = g.log_softmax_rows(conf_logits);
    let lp = g.slice_cols(lp, winner, 1);
    let ce = g.scale(lp, -1.0);

    let (wp, wv, wy, wc) = cfg.weights(agent);
    let parts = [(nll, wp), (vel, wv), (yaw, wy), (ce, wc)];
    let mut total = g.scale(parts[0].0, parts[0].1);
    for &(v, w) in &parts[1..] {
        let s = g.scale(v, w);
        total = g.add(total, s);
    }
    Ok(MotionLoss { total, nll, vel, yaw, ce, winner })
}

/// Soft-min weighted Huber distance of refined endpoints to the GT endpoint.
pub fn endpoint_loss(g: &mut Graph<'_>, anchor_endpoints: Var, offsets: Var, gt_endpoint: [f64; 2], tau_e: f64, delta: f64) -> Var {
    let n = g.shape(anchor_endpoints).0;
    let p = g.add(anchor_endpoints, offsets);
    let target = g.input(Tensor::from_vec(n, 2, (0..n).flat_map(|_| gt_endpoint).collect()));
    let diff = g.sub(p, target);
    let d = g.row_norms(diff);
    let d = g.transpose(d);
    let logits = g.scale(d, -1.0 / tau_e);
    let w = g.softmax_rows(logits);
    let h = g.huber(d, delta);
    let wh = g.mul(w, h);
    g.sum_all(wh)
}

/// Mean Huber magnitude of the per-anchor endpoint offsets.
pub fn offset_loss(g: &mut Graph<'_>, offsets: Var, delta: f64) -> Var {
    let n = g.shape(offsets).0;
    let d = g.row_norms(offsets);
    let h = g.huber(d, delta);
    let s = g.sum_all(h);
    g.scale(s, 1.0 / n as f64)
}

/// `λ ‖Q̂Q̂ᵀ − I‖²_F` on row-normalized queries; the flag reports a
/// zero-norm row.
pub fn diversity_loss(g: &mut Graph<'_>, q_adapt: Var, lambda: f64) -> (Var, bool) {
    let n = g.shape(q_adapt).0;
    let (qn, guarded) = g.l2_normalize_rows(q_adapt, crate::retrieval::NORM_EPS);
    let s = g.matmul_t(qn, qn);
    let eye = g.input(Tensor::identity(n));
    let d = g.sub(s, eye);
    let d = g.square(d);
    let f = g.sum_all(d);
    (g.scale(f, lambda), guarded)
}

/// Masked mean Huber error of single-shot neighbor trajectories. `pred` is
/// `[N_a × 2T_f]`, `truth` `[(N_a·T_f) × 2]`, `valid` per (agent, step).
pub fn neighbor_loss(g: &mut Graph<'_>, pred: Var, truth: &Tensor, valid: &[bool], delta: f64) -> Var {
    let (n_a, w) = g.shape(pred);
    let t = w / 2;
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return g.input(Tensor::scalar(0.0));
    }
    let target = g.input(truth.clone().reshape(n_a, w));
    let mask = g.input(Tensor::from_vec(n_a, w, (0..n_a * t).flat_map(|i| [f64::from(u8::from(valid[i])); 2]).collect()));
    let d = g.sub(pred, target);
    let h = g.huber(d, delta);
    let h = g.mul(h, mask);
    let s = g.sum_all(h);
    g.scale(s, 1.0 / (2 * count) as f64)
}

pub struct LossParts {
    pub motion: MotionLoss,
    pub endpoint: Var,
    pub diversity: Var,
    pub entropy: Option<Var>,
    pub aux: Option<Var>,
    pub offset: Option<Var>,
}

/// Weighted total. Terms with zero weight are left out of the graph, so
/// turning them off is bitwise identical to not computing them.
pub fn total_loss(g: &mut Graph<'_>, parts: &LossParts, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let val = |g: &Graph<'_>, v: Var| g.value(v).item();
    let named = [
        ("nll", Some(parts.motion.nll)),
        ("velocity", Some(parts.motion.vel)),
        ("yaw", Some(parts.motion.yaw)),
        ("confidence", Some(parts.motion.ce)),
        ("endpoint", Some(parts.endpoint)),
        ("diversity", Some(parts.diversity)),
        ("entropy", parts.entropy),
        ("aux_neighbor", parts.aux),
        ("offset", parts.offset),
    ];
    for (name, v) in named {
        if let Some(v) = v {
            if !val(g, v).is_finite() {
                return Err(Error::NonFinite(format!("{name} loss")));
            }
        }
    }
    let mut total = g.scale(parts.motion.total, cfg.lambda_motion);
    let e = g.scale(parts.endpoint, cfg.endpoint_weight);
    total = g.add(total, e);
    total = g.add(total, parts.diversity);
    if let (Some(h), true) = (parts.entropy, cfg.entropy_weight != 0.0) {
        let h = g.scale(h, -cfg.entropy_weight);
        total = g.add(total, h);
    }
    if let (Some(a), true) = (parts.aux, cfg.aux_weight != 0.0) {
        let a = g.scale(a, cfg.aux_weight);
        total = g.add(total, a);
    }
    if let (Some(o), true) = (parts.offset, cfg.offset_weight != 0.0) {
        let o = g.scale(o, cfg.offset_weight);
        total = g.add(total, o);
    }
    let breakdown = LossBreakdown {
        total: val(g, total),
        motion: val(g, parts.motion.total),
        nll: val(g, parts.motion.nll),
        vel: val(g, parts.motion.vel),
        yaw: val(g, parts.motion.yaw),
        ce: val(g, parts.motion.ce),
        endpoint: val(g, parts.endpoint),
        diversity: val(g, parts.diversity),
        entropy: parts.entropy.map_or(0.0, |v| val(g, v)),
        aux_neighbor: parts.aux.map_or(0.0, |v| val(g, v)),
        offset: parts.offset.map_or(0.0, |v| val(g, v)),
        winner: parts.motion.winner,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok((total, breakdown))
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += s * o.total;
        self.motion += s * o.motion;
        self.nll += s * o.nll;
        self.vel += s * o.vel;
        self.yaw += s * o.yaw;
        self.ce += s * o.ce;
        self.endpoint += s * o.endpoint;
        self.diversity += s * o.diversity;
        self.entropy += s * o.entropy;
        self.aux_neighbor += s * o.aux_neighbor;
        self.offset += s * o.offset;
    }
}
