//! Prediction heads: per-mode kinematics and confidences from the refined
//! queries, endpoint offsets from the pre-decoder anchor tokens, and an
//! optional single-shot neighbor regressor.

use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::projection::INPUT_SCALE;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Per-step kinematic channels: μx, μy, log σx, log σy, raw ρ, speed, yaw.
pub const D_KIN: usize = 7;
pub const LOG_SIGMA_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
pub const LOG_SIGMA_MAX: f64 = 6.907_755_278_982_137;
pub const RHO_SCALE: f64 = 0.99;
const KIN_SCALE: [f64; D_KIN] = [INPUT_SCALE, INPUT_SCALE, 1.0, 1.0, 1.0, INPUT_SCALE, 1.0];
/// Shrinks the kinematic output layer at init so the first predictions sit
/// near the origin with unit scale and no correlation.
const KIN_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Heads {
    pub kin: Mlp,
    pub conf: Mlp,
    pub offset: Mlp,
    pub t_fut: usize,
}

pub struct HeadOutputs {
    /// `[K·T_f × D_KIN]` with unsquashed scale and correlation channels.
    pub kin: Var,
    /// `[1 × K]`
    pub conf_logits: Var,
    /// `[N_q × 2]` meters.
    pub offsets: Var,
}

/// Squashed views of the kinematic output.
pub struct Kinematics {
    /// `[K·T_f × 2]`
    pub mu: Var,
    /// `[K·T_f × 2]`, clamped.
    pub log_sigma: Var,
    /// `[K·T_f × 1]` in (−0.99, 0.99).
    pub rho: Var,
    pub speed: Var,
    pub yaw: Var,
}

impl Heads {
    pub fn new(store: &mut ParamStore, d: usize, t_fut: usize) -> Self {
        let kin = Mlp::new(store, "heads.kin", &[d, d, t_fut * D_KIN]);
        store.get_mut(kin.last().w).scale_assign(KIN_INIT_GAIN);
        Self {
            kin,
            conf: Mlp::new(store, "heads.conf", &[d, d, 1]),
            offset: Mlp::new(store, "heads.offset", &[d, d, 2]),
            t_fut,
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, q_final: Var, q_pre: Var) -> HeadOutputs {
        let k = g.shape(q_final).0;
        let raw = self.kin.forward(g, store, q_final);
        let raw = g.reshape(raw, k * self.t_fut, D_KIN);
        let s = g.input(Tensor::row_vector(KIN_SCALE.to_vec()));
        let kin = g.mul_row(raw, s);
        let c = self.conf.forward(g, store, q_final);
        let conf_logits = g.transpose(c);
        let o = self.offset.forward(g, store, q_pre);
        HeadOutputs { kin, conf_logits, offsets: g.scale(o, INPUT_SCALE) }
    }
}

pub fn kinematics(g: &mut Graph<'_>, kin: Var) -> Kinematics {
    let mu = g.slice_cols(kin, 0, 2);
    let ls = g.slice_cols(kin, 2, 2);
    let log_sigma = g.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    let r = g.slice_cols(kin, 4, 1);
    let r = g.tanh(r);
    Kinematics { mu, log_sigma, rho: g.scale(r, RHO_SCALE), speed: g.slice_cols(kin, 5, 1), yaw: g.slice_cols(kin, 6, 1) }
}

/// Mode confidences `softmax(logits / temperature)`.
pub fn confidences(logits: &Tensor, temperature: f64) -> Vec<f64> {
    crate::tape::softmax_rows_masked(&logits.map(|x| x / temperature), None).into_vec()
}

/// Per-neighbor single-trajectory regressor, `[N_a × 2T_f]`.
#[derive(Clone, Debug)]
pub struct NeighborHead {
    pub mlp: Mlp,
}

impl NeighborHead {
    pub fn new(store: &mut ParamStore, d: usize, t_fut: usize) -> Self {
        Self { mlp: Mlp::new(store, "heads.neighbor", &[d, d, 2 * t_fut]) }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, neighbors: Var) -> Var {
        let y = self.mlp.forward(g, store, neighbors);
        g.scale(y, INPUT_SCALE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero;

    fn tokens(r: usize, d: usize, s: f64) -> Tensor {
        Tensor::from_vec(r, d, (0..r * d).map(|i| ((i as f64 + s) * 1.3).cos()).collect())
    }

    #[test]
    fn shapes_and_normalization() {
        let mut store = ParamStore::new(1);
        let h = Heads::new(&mut store, 32, 30);
        let mut g = Graph::new();
        let (qf, qp) = (g.input(tokens(6, 32, 0.0)), g.input(tokens(6, 32, 1.0)));
        let out = h.forward(&mut g, &store, qf, qp);
        assert_eq!(g.shape(out.kin), (6 * 30, D_KIN));
        assert_eq!(g.shape(out.offsets), (6, 2));
        let pi = confidences(g.value(out.conf_logits), 1.0);
        assert_eq!(pi.len(), 6);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let k = kinematics(&mut g, out.kin);
        assert!(g.value(k.rho).data().iter().all(|r| r.abs() < RHO_SCALE));
        assert!(g.value(k.log_sigma).data().iter().all(|s| s.exp() >= 1e-3 && s.exp() <= 1e3));
    }

    #[test]
    fn extreme_raw_values_are_squashed() {
        let mut g = Graph::new();
        let kin = g.input(Tensor::row_vector(vec![0.0, 0.0, 50.0, -50.0, 1e3, 0.0, 0.0]));
        let k = kinematics(&mut g, kin);
        assert_eq!(g.value(k.log_sigma).data(), &[LOG_SIGMA_MAX, LOG_SIGMA_MIN]);
        assert!((g.value(k.rho).item() - RHO_SCALE).abs() < 1e-12);
    }

    #[test]
    fn zero_offset_head_keeps_anchor_endpoints() {
        let mut store = ParamStore::new(2);
        let h = Heads::new(&mut store, 8, 4);
        let last = h.offset.last();
        zero(&mut store, last.w);
        zero(&mut store, last.b.unwrap());
        let mut g = Graph::new();
        let (qf, qp) = (g.input(tokens(3, 8, 0.0)), g.input(tokens(3, 8, 1.0)));
        let out = h.forward(&mut g, &store, qf, qp);
        let anchors = g.input(tokens(3, 2, 5.0));
        let refined = g.add(anchors, out.offsets);
        assert_eq!(g.value(refined), g.value(anchors));
    }

    #[test]
    fn temperature_sharpens_confidences() {
        let l = Tensor::row_vector(vec![1.0, 0.0]);
        let a = confidences(&l, 1.0);
        let b = confidences(&l, 0.5);
        assert!(b[0] > a[0]);
        assert!((b[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    }
}
