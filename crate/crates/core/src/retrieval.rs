//! Anchor retrieval: orthogonal latent queries adapted by dual-level gated
//! cross-attention, cosine scoring against the frozen bank, straight-through
//! discrete selection and anchor-token assembly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::Serialize;

use crate::bank::orthonormal_rows;
use crate::config::{ModelConfig, RetrievalMode};
use crate::error::{Error, Result};
use crate::nn::{Attention, Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::projection::INPUT_SCALE;
use crate::tape::{argmax, Graph, Var};
use crate::tensor::Tensor;

/// Elements reported per (query, modality) in the attention dump.
pub const TOP_K_REPORT: usize = 5;
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Target,
    Neighbors,
    Map,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Target, Modality::Neighbors, Modality::Map];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Target => "target",
            Modality::Neighbors => "neighbors",
            Modality::Map => "map",
        }
    }
}

/// Seeded `[N_q × D]` matrix with orthonormal rows.
pub fn init_orthogonal_queries(n_q: usize, d: usize, seed: u64) -> Result<Tensor> {
    if n_q > d {
        return Err(Error::invalid(format!("cannot fit {n_q} orthogonal queries in {d} dimensions")));
    }
    if n_q == 0 {
        return Err(Error::invalid("need at least one query"));
    }
    Ok(orthonormal_rows(n_q, d, seed))
}

/// Per-modality pathway: single-head cross-attention, micro gate and macro
/// router logit.
#[derive(Clone, Debug)]
pub struct Pathway {
    pub attn: Attention,
    pub gate: Mlp,
    pub router: Linear,
}

#[derive(Clone, Debug)]
pub struct Retrieval {
    pub q_base: ParamId,
    /// Indexed like [`Modality::ALL`]; `None` when the modality is disabled.
    pub pathways: [Option<Pathway>; 3],
    pub null_logit: ParamId,
    pub to_emb: Option<Linear>,
    pub emb_mlp: Mlp,
    pub traj_mlp: Mlp,
    pub mode: RetrievalMode,
    pub unique: bool,
}

/// One modality's context tokens and validity mask.
pub struct Context<'m> {
    pub tokens: Var,
    pub mask: &'m [bool],
}

pub struct Adapted {
    pub q_base: Var,
    pub q_adapt: Var,
    /// `(w_target, w_neighbors, w_map, w_null)`
    pub routing: [f64; 4],
    /// Micro gates per modality, `[N_q × D]` in (0, 1).
    pub gates: [Option<Tensor>; 3],
    /// Cross-attention weights per modality, `[N_q × L_m]`.
    pub attention: [Option<Tensor>; 3],
}

pub struct Selection {
    /// `[N_q × B]`; one-hot forward value in straight-through mode.
    pub y: Var,
    pub pi: Tensor,
    pub indices: Vec<usize>,
}

pub struct Anchors {
    /// `[N_q × D]`
    pub tokens: Var,
    /// `[N_q × D_emb]`
    pub embeddings: Var,
    /// `[N_q × 2T_f]`
    pub trajectories: Var,
}

/// Top elements one query attends to within one modality.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopElements {
    pub query: usize,
    pub modality: Modality,
    /// `-1` pads modalities with fewer than [`TOP_K_REPORT`] valid elements.
    pub elements: Vec<i64>,
    pub weights: Vec<f64>,
}

impl Retrieval {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, t_fut: usize, seed: u64) -> Result<Self> {
        let d = cfg.d;
        let q = init_orthogonal_queries(cfg.n_q, d, seed ^ 0x5eed_0f_9a3e)?;
        let q_base = store.add_tensor("retrieval.q_base", q);
        let enabled = [cfg.use_target, cfg.use_neighbors, cfg.use_map];
        let pathways = std::array::from_fn(|i| {
            enabled[i].then(|| {
                let n = Modality::ALL[i].name();
                Pathway {
                    attn: Attention::new(store, &format!("retrieval.{n}.attn"), d, 1),
                    gate: Mlp::new(store, &format!("retrieval.{n}.gate"), &[2 * d, d, d]),
                    router: Linear::new(store, &format!("retrieval.{n}.router"), d, 1, true),
                }
            })
        });
        let null_logit = store.add("retrieval.null_logit", 1, 1, Init::Zeros);
        let to_emb = (cfg.d_emb != d).then(|| Linear::new(store, "retrieval.to_emb", d, cfg.d_emb, false));
        Ok(Self {
            q_base,
            pathways,
            null_logit,
            to_emb,
            emb_mlp: Mlp::new(store, "retrieval.emb_mlp", &[cfg.d_emb, d, d]),
            traj_mlp: Mlp::new(store, "retrieval.traj_mlp", &[2 * t_fut, d, d]),
            mode: cfg.retrieval,
            unique: cfg.unique,
        })
    }

    /// Dual-level gated cross-attention. A modality whose context is fully
    /// masked drops out of the router, so the null slot takes its mass.
    pub fn adapt<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, contexts: [Option<Context<'_>>; 3]) -> Adapted {
        let q_base = g.param(store, self.q_base);
        let nq = g.shape(q_base).0;
        let mut gates: [Option<Tensor>; 3] = Default::default();
        let mut attention: [Option<Tensor>; 3] = Default::default();
        let mut updates = Vec::new();
        let mut logits = Vec::new();
        let mut slots = Vec::new();
        for (i, ctx) in contexts.iter().enumerate() {
            let (Some(p), Some(c)) = (&self.pathways[i], ctx) else { continue };
            if !c.mask.iter().any(|&v| v) {
                continue;
            }
            let out = p.attn.forward(g, store, q_base, c.tokens, Some(c.mask));
            let h = out.out;
            let cat = g.concat_cols(&[q_base, h]);
            let gl = p.gate.forward(g, store, cat);
            let gate = g.sigmoid(gl);
            gates[i] = Some(g.value(gate).clone());
            attention[i] = Some(out.weights);
            updates.push(g.mul(gate, h));
            let hs = g.sum_rows(h);
            let hm = g.scale(hs, 1.0 / nq as f64);
            logits.push(p.router.forward(g, store, hm));
            slots.push(i);
        }
        logits.push(g.param(store, self.null_logit));
        slots.push(3);
        let lv = g.concat_cols(&logits);
        let w = g.softmax_rows(lv);
        let mut routing = [0.0; 4];
        for (j, &s) in slots.iter().enumerate() {
            routing[s] = g.value(w).get(0, j);
        }
        let mut q_adapt = q_base;
        for (j, u) in updates.into_iter().enumerate() {
            let wj = g.slice_cols(w, j, 1);
            let term = g.scale_var(u, wj);
            q_adapt = g.add(q_adapt, term);
        }
        Adapted { q_base, q_adapt, routing, gates, attention }
    }

    /// Cosine logits `[N_q × B]` against unit-norm bank rows. The flag
    /// reports whether a query row hit the zero-norm guard.
    pub fn bank_logits<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, q_adapt: Var, bank_unit: Var) -> (Var, bool) {
        let q = match &self.to_emb {
            Some(l) => l.forward(g, store, q_adapt),
            None => q_adapt,
        };
        let (qn, guarded) = g.l2_normalize_rows(q, NORM_EPS);
        (g.matmul_t(qn, bank_unit), guarded)
    }

    pub fn select(&self, g: &mut Graph<'_>, z: Var, tau: f64, noise: Option<&Tensor>) -> Selection {
        match self.mode {
            RetrievalMode::St => {
                let (y, pi, indices) = g.straight_through_select(z, tau, noise, self.unique);
                Selection { y, pi, indices }
            }
            RetrievalMode::Soft => {
                let zp = match noise {
                    Some(n) => {
                        let nv = g.input(n.clone());
                        g.add(z, nv)
                    }
                    None => z,
                };
                let s = g.scale(zp, 1.0 / tau);
                let y = g.softmax_rows(s);
                let pi = g.value(y).clone();
                let indices = (0..pi.rows()).map(|r| argmax(pi.row(r))).collect();
                Selection { y, pi, indices }
            }
        }
    }

    /// `A = q_adapt + MLP_emb(Y E) + MLP_traj(Y T)`.
    pub fn assemble<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, y: Var, q_adapt: Var, bank_emb: Var, bank_traj: Var) -> Anchors {
        let embeddings = g.matmul(y, bank_emb);
        let trajectories = g.matmul(y, bank_traj);
        let e = self.emb_mlp.forward(g, store, embeddings);
        let ts = g.scale(trajectories, 1.0 / INPUT_SCALE);
        let t = self.traj_mlp.forward(g, store, ts);
        let a = g.add(q_adapt, e);
        let tokens = g.add(a, t);
        Anchors { tokens, embeddings, trajectories }
    }
}

/// Seeded standard-Gumbel matrix multiplied by `scale`.
pub fn gumbel_noise(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| scale * dist.sample(&mut rng)).collect())
}

/// Top-[`TOP_K_REPORT`] valid elements per query, weights nonincreasing,
/// ties to the lowest index.
pub fn top_elements(weights: &Tensor, mask: &[bool], modality: Modality) -> Vec<TopElements> {
    (0..weights.rows())
        .map(|q| {
            let row = weights.row(q);
            let mut idx: Vec<usize> = (0..row.len()).filter(|&i| mask[i]).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(TOP_K_REPORT);
            let mut elements: Vec<i64> = idx.iter().map(|&i| i as i64).collect();
            let mut w: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
            while elements.len() < TOP_K_REPORT {
                elements.push(-1);
                w.push(0.0);
            }
            TopElements { query: q, modality, elements, weights: w }
        })
        .collect()
}
