//! Finite-difference gradient checks of each component against the tape.
//!
//! Each check builds a tiny seeded instance, reduces the component outputs
//! to a scalar with fixed random weights and compares the analytic
//! parameter gradients with central differences, group by group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bank::{build_bank, futures_matrix, BuildMode};
use crate::config::{three_intent_mix, LossConfig, ModelConfig, RetrievalMode};
use crate::decoder::Decoder;
use crate::encoder::{EncoderInput, SceneEncoder};
use crate::error::{Error, Result};
use crate::heads::{kinematics, Heads, NeighborHead};
use crate::losses::{diversity_loss, endpoint_loss, neighbor_loss, offset_loss, total_loss, wta_motion_loss, LossParts};
use crate::model::{BankTensors, R2p, StepOptions};
use crate::params::{Init, ParamStore};
use crate::pgqa::pgqa;
use crate::projection::Projection;
use crate::retrieval::{Context, Retrieval};
use crate::scene::{generate_dataset, AgentType, Dims};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-4;
pub const LOSS_THRESHOLD: f64 = 1e-5;

/// Relative jump between one-sided slopes above which a coordinate is
/// treated as sitting on a kink (ReLU corner, max-pool switch, clamp edge).
const KINK_RATIO: f64 = 1e-2;

/// Floor of each group's error denominator as a fraction of the largest
/// gradient of the whole objective. Groups whose true gradient is tiny
/// would otherwise be judged on floating-point noise of the objective.
pub const GLOBAL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Projection,
    Retrieval,
    Encoder,
    Decoder,
    Heads,
    Losses,
    End2end,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Projection,
        Component::Retrieval,
        Component::Encoder,
        Component::Decoder,
        Component::Heads,
        Component::Losses,
        Component::End2end,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Projection => "projection",
            Component::Retrieval => "retrieval",
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::Heads => "heads",
            Component::Losses => "losses",
            Component::End2end => "end2end",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown component {s:?}")))
    }

    pub fn threshold(self) -> f64 {
        if self == Component::Losses {
            LOSS_THRESHOLD
        } else {
            THRESHOLD
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub group: String,
    pub rel_err: f64,
    pub max_abs_grad: f64,
    pub coords: usize,
    /// Coordinates skipped because they sit on a kink.
    pub kinks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub component: Component,
    pub threshold: f64,
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.rel_err < self.threshold)
    }

    pub fn failures(&self) -> Vec<&GroupError> {
        self.groups.iter().filter(|g| !(g.rel_err < self.threshold)).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
    }

    /// `Err(GradCheck)` naming every failing group.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let names: Vec<String> = self.failures().iter().map(|g| format!("{} ({:.3e})", g.group, g.rel_err)).collect();
        Err(Error::GradCheck(format!("{}: {}", self.component.name(), names.join(", "))))
    }
}

/// Scalar value of a component and, when asked, dense parameter gradients.
pub type Objective<'f> = dyn Fn(&ParamStore, bool) -> Result<(f64, Option<Vec<Tensor>>)> + 'f;

/// Evaluates `out` and optionally runs the reverse sweep.
pub fn finish(g: &Graph<'_>, out: Var, store: &ParamStore, grads: bool) -> (f64, Option<Vec<Tensor>>) {
    let v = g.value(out).item();
    (v, grads.then(|| g.backward(out).param_grads(store)))
}

/// `Σ R ⊙ x` over `parts` with fixed seeded weights `R`.
pub fn random_projection(g: &mut Graph<'_>, parts: &[Var], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = None;
    for &p in parts {
        let (r, c) = g.shape(p);
        let w = g.input(Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()));
        let m = g.mul(p, w);
        let s = g.sum_all(m);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    total.expect("at least one part")
}

/// Central differences on every scalar of every parameter in `store`,
/// grouped by parameter name. A group's error is
/// `max|a − n| / max(max|a|, max|n|, GLOBAL_FLOOR · max|a_all|, 1e-8)`.
pub fn check_objective(component: Component, store: &ParamStore, f: &Objective<'_>) -> Result<GradReport> {
    let (_, analytic) = f(store, true)?;
    let analytic = analytic.expect("gradients requested");
    let floor = GLOBAL_FLOOR * analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let mut work = store.clone();
    let mut groups = Vec::new();
    for id in store.ids() {
        let a = &analytic[id.index()];
        let scale = a.max_abs();
        let mut max_diff: f64 = 0.0;
        let mut max_num: f64 = 0.0;
        let mut kinks = 0;
        for i in 0..a.len() {
            let x0 = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x0 + STEP;
            let (fp, _) = f(&work, false)?;
            work.get_mut(id).data_mut()[i] = x0 - STEP;
            let (fm, _) = f(&work, false)?;
            work.get_mut(id).data_mut()[i] = x0;
            let (f0, _) = f(&work, false)?;
            let (right, left) = ((fp - f0) / STEP, (f0 - fm) / STEP);
            if (right - left).abs() > KINK_RATIO * right.abs().max(left.abs()).max(scale) {
                kinks += 1;
                continue;
            }
            let n = (fp - fm) / (2.0 * STEP);
            max_diff = max_diff.max((a.data()[i] - n).abs());
            max_num = max_num.max(n.abs());
        }
        let denom = scale.max(max_num).max(floor).max(1e-8);
        groups.push(GroupError { group: store.name(id).to_string(), rel_err: max_diff / denom, max_abs_grad: scale, coords: a.len(), kinks });
    }
    Ok(GradReport { component, threshold: component.threshold(), groups })
}

/// Tiny scene dimensions used by every check.
pub const TINY: Dims = Dims { t_hist: 4, t_fut: 5, n_agents: 3, n_lanes: 3, lane_nodes: 3, n_lights: 1 };

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        n_q: 4,
        k: 3,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_mult: 2,
        d_emb: 6,
        retrieval: RetrievalMode::Soft,
        gumbel: false,
        use_map: true,
        ..ModelConfig::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Runs the check for one component on a seeded tiny instance.
pub fn gradcheck(component: Component, seed: u64) -> Result<GradReport> {
    let cfg = tiny_model_config();
    let scenes = generate_dataset(seed, 24, &three_intent_mix(), TINY)?;
    let scene = &scenes[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67ad);
    let mut store = ParamStore::new(seed);
    let d = cfg.d;
    match component {
        Component::Projection => {
            let proj = Projection::new(&mut store, d);
            let f = |s: &ParamStore, want: bool| {
                let mut g = Graph::new();
                let p = proj.forward(&mut g, s, scene)?;
                let out = random_projection(&mut g, &[p.target_dense, p.target, p.neighbors, p.lanes, p.lights], seed);
                Ok(finish(&g, out, s, want))
            };
            check_objective(component, &store, &f)
        }
        Component::Retrieval => {
            let ret = Retrieval::new(&mut store, &cfg, TINY.t_fut, seed)?;
            let bank = tiny_bank(&scenes, &cfg, seed)?;
            let ctx: Vec<Tensor> = [TINY.t_hist, TINY.n_agents, 5].iter().map(|&n| random_tensor(&mut rng, n, d, 1.0)).collect();
            let masks = [vec![true, true, false, true], vec![true, false, true], vec![true, true, true, false, true]];
            let f = |s: &ParamStore, want: bool| {
                let mut g = Graph::new();
                let contexts = std::array::from_fn(|i| Some(Context { tokens: g.input(ctx[i].clone()), mask: &masks[i] }));
                let adapted = ret.adapt(&mut g, s, contexts);
                let emb = g.input(bank.unit.clone());
                let traj = g.input(bank.trajectories.clone());
                let (z, _) = ret.bank_logits(&mut g, s, adapted.q_adapt, emb);
                let sel = ret.select(&mut g, z, 0.7, None);
                let a = ret.assemble(&mut g, s, sel.y, adapted.q_adapt, emb, traj);
                let out = random_projection(&mut g, &[a.tokens, a.trajectories], seed);
                Ok(finish(&g, out, s, want))
            };
            let mut report = check_objective(component, &store, &f)?;
            report.groups.push(ste_pi_path(seed)?);
            Ok(report)
        }
        Component::Encoder => {
            let enc = SceneEncoder::new(&mut store, d, cfg.heads, 2, 2 * d);
            let x: Vec<Tensor> = [1, TINY.n_agents, TINY.n_lanes, TINY.n_lights].iter().map(|&n| random_tensor(&mut rng, n, d, 1.0)).collect();
            let (nm, lm, tm) = (vec![true, false, true], vec![true, true, false], vec![true]);
            let f = |s: &ParamStore, want: bool| {
                let mut g = Graph::new();
                let v: Vec<Var> = x.iter().map(|t| g.input(t.clone())).collect();
                let e = enc.encode(
                    &mut g,
                    s,
                    EncoderInput {
                        target: v[0],
                        target_valid: true,
                        neighbors: v[1],
                        neighbor_mask: &nm,
                        lanes: v[2],
                        lane_mask: &lm,
                        lights: v[3],
                        light_mask: &tm,
                    },
                )?;
                let out = random_projection(&mut g, &[e.focal, e.env, e.neighbors], seed);
                Ok(finish(&g, out, s, want))
            };
            check_objective(component, &store, &f)
        }
        Component::Decoder => {
            let dec = Decoder::new(&mut store, d, cfg.heads, 2, 2 * d);
            let n = 5;
            let tokens = store.add_tensor("pgqa.tokens", random_tensor(&mut rng, n, d, 1.0));
            let trajs = store.add_tensor("pgqa.trajectories", random_tensor(&mut rng, n, 2 * TINY.t_fut, 5.0));
            let pi = random_tensor(&mut rng, n, 7, 1.0).map(f64::exp);
            let focal = random_tensor(&mut rng, 1, d, 1.0);
            let env = random_tensor(&mut rng, 6, d, 1.0);
            let mask = [true, true, false, true, true, false];
            let f = |s: &ParamStore, want: bool| {
                let mut g = Graph::new();
                let (tk, tr) = (g.param(s, tokens), g.param(s, trajs));
                let p = pgqa(&mut g, tk, tr, &pi, 3, 4.0)?;
                let (fv, ev) = (g.input(focal.clone()), g.input(env.clone()));
                let q = dec.decode(&mut g, s, p.grouped, fv, ev, &mask);
                let out = random_projection(&mut g, &[q, p.medoids, p.entropy], seed);
                Ok(finish(&g, out, s, want))
            };
            check_objective(component, &store, &f)
        }
        Component::Heads => {
            let heads = Heads::new(&mut store, d, TINY.t_fut);
            let nh = NeighborHead::new(&mut store, d, TINY.t_fut);
            let (qf, qp, nb) = (random_tensor(&mut rng, 3, d, 1.0), random_tensor(&mut rng, 3, d, 1.0), random_tensor(&mut rng, 2, d, 1.0));
            let f = |s: &ParamStore, want: bool| {
                let mut g = Graph::new();
                let (a, b, c) = (g.input(qf.clone()), g.input(qp.clone()), g.input(nb.clone()));
                let h = heads.forward(&mut g, s, a, b);
                let k = kinematics(&mut g, h.kin);
                let n = nh.forward(&mut g, s, c);
                let out = random_projection(&mut g, &[k.mu, k.log_sigma, k.rho, k.speed, k.yaw, h.conf_logits, h.offsets, n], seed);
                Ok(finish(&g, out, s, want))
            };
            check_objective(component, &store, &f)
        }
        Component::Losses => losses_check(seed, &mut rng, scene),
        Component::End2end => {
            let cfg = ModelConfig { unique: false, ..cfg };
            let lcfg = LossConfig { entropy_weight: 0.1, aux_weight: 0.5, offset_weight: 0.3, ..LossConfig::default() };
            let model = R2p::new(&mut store, &cfg, TINY, true, seed)?;
            let bank = tiny_bank(&scenes, &cfg, seed)?;
            let f = |s: &ParamStore, want: bool| {
                let mut g = Graph::new();
                let fwd = model.forward(&mut g, s, &bank, scene, StepOptions { tau: 0.7, noise_seed: None })?;
                let (loss, _) = model.loss(&mut g, &fwd, scene, &lcfg)?;
                Ok(finish(&g, loss, s, want))
            };
            check_objective(component, &store, &f)
        }
    }
}

fn tiny_bank(scenes: &[crate::scene::Scene], cfg: &ModelConfig, seed: u64) -> Result<BankTensors> {
    let bank = build_bank(&futures_matrix(scenes), TINY.t_fut, 2, 4, BuildMode::Clustered, seed, cfg.d_emb)?;
    Ok(BankTensors::new(&bank))
}

/// Loss inputs registered as parameters so they share the same checker.
fn losses_check(seed: u64, rng: &mut ChaCha8Rng, scene: &crate::scene::Scene) -> Result<GradReport> {
    let (k, t, n_q) = (3, TINY.t_fut, 4);
    let mut store = ParamStore::new(seed);
    let gt = scene.target_future.clone();
    let mut kin0 = random_tensor(rng, k * t, crate::heads::D_KIN, 0.5);
    for m in 0..k {
        for s in 0..t {
            kin0.set(m * t + s, 0, gt.get(s, 0) + rng.random_range(-1.0..1.0) * (m + 1) as f64);
            kin0.set(m * t + s, 1, gt.get(s, 1) + rng.random_range(-1.0..1.0) * (m + 1) as f64);
        }
    }
    let kin = store.add_tensor("motion.kin", kin0);
    let conf = store.add_tensor("motion.conf", random_tensor(rng, 1, k, 1.0));
    let anchors = store.add_tensor("endpoint.anchors", random_tensor(rng, n_q, 2, 4.0));
    let offsets = store.add_tensor("endpoint.offsets", random_tensor(rng, n_q, 2, 0.5));
    let q = store.add("diversity.queries", n_q, 6, Init::Normal(1.0));
    let pred = store.add_tensor("neighbor.pred", random_tensor(rng, 2, 2 * t, 3.0));
    let ent = store.add_tensor("entropy.logits", random_tensor(rng, k, n_q, 1.0));
    let truth = random_tensor(rng, 2 * t, 2, 3.0);
    let valid: Vec<bool> = (0..2 * t).map(|i| i % 3 != 1).collect();
    let lcfg = LossConfig { entropy_weight: 0.1, aux_weight: 0.5, offset_weight: 0.3, ..LossConfig::default() };
    let f = |s: &ParamStore, want: bool| {
        let mut g = Graph::new();
        let kv = g.param(s, kin);
        let cv = g.param(s, conf);
        let motion = wta_motion_loss(&mut g, kv, cv, &gt, &lcfg, AgentType::Vehicle)?;
        let (a, o) = (g.param(s, anchors), g.param(s, offsets));
        let endpoint = endpoint_loss(&mut g, a, o, scene.future_endpoint(), lcfg.tau_e, lcfg.huber_delta);
        let qv = g.param(s, q);
        let (diversity, _) = diversity_loss(&mut g, qv, lcfg.lambda_div);
        let pv = g.param(s, pred);
        let aux = neighbor_loss(&mut g, pv, &truth, &valid, lcfg.huber_delta);
        let ev = g.param(s, ent);
        let ls = g.log_softmax_rows(ev);
        let p = g.exp(ls);
        let pl = g.mul(p, ls);
        let h = g.sum_all(pl);
        let entropy = g.scale(h, -1.0 / k as f64);
        let offset = offset_loss(&mut g, o, lcfg.huber_delta);
        let parts = LossParts { motion, endpoint, diversity, entropy: Some(entropy), aux: Some(aux), offset: Some(offset) };
        let (total, _) = total_loss(&mut g, &parts, &lcfg)?;
        Ok(finish(&g, total, s, want))
    };
    check_objective(Component::Losses, &store, &f)
}

/// Straight-through path with noise off: the analytic gradient of
/// `Σ R ⊙ (Y_ST E)` with respect to the queries must equal the finite
/// difference of the soft surrogate `Σ R ⊙ (softmax(Z/τ) E)`.
pub fn ste_pi_path(seed: u64) -> Result<GroupError> {
    let (n_q, b, d_emb, tau) = (3, 8, 5, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57e);
    let mut bank = random_tensor(&mut rng, b, d_emb, 1.0);
    for r in 0..b {
        let n = bank.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        bank.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    let weights = random_tensor(&mut rng, n_q, d_emb, 1.0);
    let mut store = ParamStore::new(seed);
    let q = store.add_tensor("ste.queries", random_tensor(&mut rng, n_q, d_emb, 1.0));
    let build = |g: &mut Graph<'_>, s: &ParamStore, hard: bool| -> (Var, Var) {
        let qv = g.leaf(s.get(q).clone());
        let (qn, _) = g.l2_normalize_rows(qv, crate::retrieval::NORM_EPS);
        let e = g.input(bank.clone());
        let z = g.matmul_t(qn, e);
        let y = if hard {
            g.straight_through_select(z, tau, None, false).0
        } else {
            let zs = g.scale(z, 1.0 / tau);
            g.softmax_rows(zs)
        };
        let ret = g.matmul(y, e);
        let w = g.input(weights.clone());
        let m = g.mul(ret, w);
        (g.sum_all(m), qv)
    };
    let mut g = Graph::new();
    let (out, qv) = build(&mut g, &store, true);
    let analytic = g.backward(out).wrt(qv).expect("query gradient").clone();
    let mut work = store.clone();
    let mut max_diff: f64 = 0.0;
    let mut max_num: f64 = 0.0;
    for i in 0..analytic.len() {
        let x0 = store.get(q).data()[i];
        let mut eval = |x: f64| {
            work.get_mut(q).data_mut()[i] = x;
            let mut g = Graph::new();
            let (o, _) = build(&mut g, &work, false);
            g.value(o).item()
        };
        let n = (eval(x0 + STEP) - eval(x0 - STEP)) / (2.0 * STEP);
        work.get_mut(q).data_mut()[i] = x0;
        max_diff = max_diff.max((analytic.data()[i] - n).abs());
        max_num = max_num.max(n.abs());
    }
    let scale = analytic.max_abs();
    Ok(GroupError { group: "ste.pi_path".into(), rel_err: max_diff / scale.max(max_num).max(1e-8), max_abs_grad: scale, coords: analytic.len(), kinks: 0 })
}
