//! The full forecaster: one scene in, K weighted trajectory modes out.

use crate::bank::MotionBank;
use crate::config::{LossConfig, ModelConfig};
use crate::decoder::Decoder;
use crate::encoder::{EncodedScene, EncoderInput, SceneEncoder};
use crate::error::{Error, Result};
use crate::heads::{confidences, HeadOutputs, Heads, NeighborHead};
use crate::losses::{diversity_loss, endpoint_loss, neighbor_loss, offset_loss, total_loss, wta_motion_loss, LossBreakdown, LossParts};
use crate::params::ParamStore;
use crate::pgqa::{pgqa, PgqaOutput};
use crate::projection::{Projection, ProjectedScene};
use crate::retrieval::{gumbel_noise, Adapted, Anchors, Context, Retrieval, Selection};
use crate::scene::{Dims, Scene, AGENT_VALID};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Bank arrays as the model consumes them: f64 unit-norm embeddings and
/// flattened trajectories.
#[derive(Clone, Debug)]
pub struct BankTensors {
    pub unit: Tensor,
    pub trajectories: Tensor,
    pub checksum: u32,
}

impl BankTensors {
    pub fn new(bank: &MotionBank) -> Self {
        let mut unit = bank.embeddings.clone();
        for r in 0..unit.rows() {
            let n = unit.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            unit.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        Self { unit, trajectories: bank.trajectories.clone(), checksum: bank.checksum() }
    }

    pub fn len(&self) -> usize {
        self.unit.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.rows() == 0
    }
}

/// Per-call retrieval settings.
#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub tau: f64,
    /// Seed of the Gumbel draw; `None` turns noise off.
    pub noise_seed: Option<u64>,
}

pub struct Forward {
    pub projected: ProjectedScene,
    pub target_time_mask: Vec<bool>,
    pub adapted: Adapted,
    pub logits: Var,
    pub selection: Selection,
    pub anchors: Anchors,
    /// `[N_q × 2]`
    pub anchor_endpoints: Var,
    pub encoded: EncodedScene,
    pub pgqa: Option<PgqaOutput>,
    pub heads: HeadOutputs,
    pub neighbor_pred: Option<Var>,
    /// A query row hit the zero-norm guard during retrieval.
    pub guarded: bool,
}

#[derive(Clone, Debug)]
pub struct R2p {
    pub cfg: ModelConfig,
    pub dims: Dims,
    pub projection: Projection,
    pub retrieval: Retrieval,
    pub encoder: SceneEncoder,
    pub decoder: Decoder,
    pub heads: Heads,
    pub neighbor_head: Option<NeighborHead>,
}

/// SplitMix64 finalizer over a sequence of words.
pub fn mix_seed(words: &[u64]) -> u64 {
    words.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &w| {
        let mut z = acc ^ w.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

impl R2p {
    /// Registers every parameter in `store`. The neighbor head exists only
    /// when `aux_head` is set.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, dims: Dims, aux_head: bool, seed: u64) -> Result<Self> {
        if cfg.k > cfg.n_q {
            return Err(Error::invalid(format!("K = {} exceeds N_q = {}", cfg.k, cfg.n_q)));
        }
        let ff = cfg.ff_mult * cfg.d;
        Ok(Self {
            cfg: cfg.clone(),
            dims,
            projection: Projection::new(store, cfg.d),
            retrieval: Retrieval::new(store, cfg, dims.t_fut, seed)?,
            encoder: SceneEncoder::new(store, cfg.d, cfg.heads, cfg.enc_layers, ff),
            decoder: Decoder::new(store, cfg.d, cfg.heads, cfg.dec_layers, ff),
            heads: Heads::new(store, cfg.d, dims.t_fut),
            neighbor_head: aux_head.then(|| NeighborHead::new(store, cfg.d, dims.t_fut)),
        })
    }

    pub fn check_bank(&self, bank: &BankTensors) -> Result<()> {
        if bank.unit.cols() != self.cfg.d_emb {
            return Err(Error::Mismatch(format!("bank embedding width {} but model expects {}", bank.unit.cols(), self.cfg.d_emb)));
        }
        if bank.trajectories.cols() != 2 * self.dims.t_fut {
            return Err(Error::Mismatch(format!("bank horizon {} but model expects {}", bank.trajectories.cols() / 2, self.dims.t_fut)));
        }
        if bank.is_empty() {
            return Err(Error::invalid("empty bank"));
        }
        Ok(())
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, bank: &'a BankTensors, scene: &Scene, opts: StepOptions) -> Result<Forward> {
        if scene.dims != self.dims {
            return Err(Error::invalid("scene dimensions do not match the model"));
        }
        let projected = self.projection.forward(g, store, scene)?;
        let target_time_mask: Vec<bool> = (0..self.dims.t_hist).map(|s| scene.target_history.get(s, AGENT_VALID) > 0.5).collect();
        let map_mask: Vec<bool> = projected.lane_mask.iter().chain(&projected.light_mask).copied().collect();
        let map_tokens = if self.cfg.use_map { Some(g.concat_rows(&[projected.lanes, projected.lights])) } else { None };
        let contexts = [
            Some(Context { tokens: projected.target_dense, mask: &target_time_mask }),
            Some(Context { tokens: projected.neighbors, mask: &projected.neighbor_mask }),
            map_tokens.map(|tokens| Context { tokens, mask: &map_mask }),
        ];
        let adapted = self.retrieval.adapt(g, store, contexts);

        let emb = g.input_ref(&bank.unit);
        let traj = g.input_ref(&bank.trajectories);
        let (logits, guarded) = self.retrieval.bank_logits(g, store, adapted.q_adapt, emb);
        let noise = opts.noise_seed.map(|s| gumbel_noise(self.cfg.n_q, bank.len(), s, opts.tau));
        let selection = self.retrieval.select(g, logits, opts.tau, noise.as_ref());
        let anchors = self.retrieval.assemble(g, store, selection.y, adapted.q_adapt, emb, traj);
        let w = 2 * self.dims.t_fut;
        let anchor_endpoints = g.slice_cols(anchors.trajectories, w - 2, 2);

        let encoded = self.encoder.encode(
            g,
            store,
            EncoderInput {
                target: projected.target,
                target_valid: true,
                neighbors: projected.neighbors,
                neighbor_mask: &projected.neighbor_mask,
                lanes: projected.lanes,
                lane_mask: &projected.lane_mask,
                lights: projected.lights,
                light_mask: &projected.light_mask,
            },
        )?;

        let grouped = if self.cfg.n_q > self.cfg.k {
            Some(pgqa(g, anchors.tokens, anchors.trajectories, &selection.pi, self.cfg.k, self.cfg.tau_g)?)
        } else {
            None
        };
        let (queries, query_trajs) = match &grouped {
            Some(p) => (p.grouped, p.medoids),
            None => (anchors.tokens, anchors.trajectories),
        };
        let q_final = self.decoder.decode(g, store, queries, encoded.focal, encoded.env, &encoded.env_mask);
        let mut heads = self.heads.forward(g, store, q_final, anchors.tokens);
        if self.cfg.kin_residual {
            let k = self.cfg.k;
            let base = g.reshape(query_trajs, k * self.dims.t_fut, 2);
            let pad = g.input(Tensor::zeros(k * self.dims.t_fut, crate::heads::D_KIN - 2));
            let base = g.concat_cols(&[base, pad]);
            heads.kin = g.add(heads.kin, base);
        }
        let neighbor_pred = self.neighbor_head.as_ref().map(|h| h.forward(g, store, encoded.neighbors));
        Ok(Forward {
            projected,
            target_time_mask,
            adapted,
            logits,
            selection,
            anchors,
            anchor_endpoints,
            encoded,
            pgqa: grouped,
            heads,
            neighbor_pred,
            guarded,
        })
    }

    pub fn loss(&self, g: &mut Graph<'_>, fwd: &Forward, scene: &Scene, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
        let motion = wta_motion_loss(g, fwd.heads.kin, fwd.heads.conf_logits, &scene.target_future, cfg, scene.agent_type)?;
        let endpoint = endpoint_loss(g, fwd.anchor_endpoints, fwd.heads.offsets, scene.future_endpoint(), cfg.tau_e, cfg.huber_delta);
        let (diversity, _) = diversity_loss(g, fwd.adapted.q_adapt, cfg.lambda_div);
        let aux = match (fwd.neighbor_pred, cfg.aux_weight != 0.0) {
            (Some(p), true) => {
                let valid: Vec<bool> = (0..self.dims.n_agents * self.dims.t_fut)
                    .map(|i| scene.neighbor_future_valid[i] && fwd.projected.neighbor_mask[i / self.dims.t_fut])
                    .collect();
                Some(neighbor_loss(g, p, &scene.neighbor_futures, &valid, cfg.huber_delta))
            }
            _ => None,
        };
        let offset = (cfg.offset_weight != 0.0).then(|| offset_loss(g, fwd.heads.offsets, cfg.huber_delta));
        let parts = LossParts { motion, endpoint, diversity, entropy: fwd.pgqa.as_ref().map(|p| p.entropy), aux, offset };
        total_loss(g, &parts, cfg)
    }
}

/// Plain-value view of a forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[K·T_f × 2]`
    pub positions: Tensor,
    pub confidences: Vec<f64>,
    /// `[N_q × 2]`
    pub anchor_endpoints: Tensor,
    /// `[N_q × 2T_f]`
    pub anchor_trajectories: Tensor,
    pub offsets: Tensor,
    pub selected: Vec<usize>,
}

impl Prediction {
    pub fn from_forward(g: &Graph<'_>, fwd: &Forward, conf_temperature: f64) -> Self {
        let kin = g.value(fwd.heads.kin);
        let positions = Tensor::from_vec(kin.rows(), 2, (0..kin.rows()).flat_map(|r| [kin.get(r, 0), kin.get(r, 1)]).collect());
        Self {
            positions,
            confidences: confidences(g.value(fwd.heads.conf_logits), conf_temperature),
            anchor_endpoints: g.value(fwd.anchor_endpoints).clone(),
            anchor_trajectories: g.value(fwd.anchors.trajectories).clone(),
            offsets: g.value(fwd.heads.offsets).clone(),
            selected: fwd.selection.indices.clone(),
        }
    }

    /// Smallest distance from a selected anchor endpoint to `gt`.
    pub fn anchor_distance(&self, gt: [f64; 2]) -> f64 {
        (0..self.anchor_endpoints.rows())
            .map(|r| (self.anchor_endpoints.get(r, 0) - gt[0]).hypot(self.anchor_endpoints.get(r, 1) - gt[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{build_bank, futures_matrix, BuildMode};
    use crate::config::DataConfig;
    use crate::scene::generate_dataset;

    fn setup(cfg: &ModelConfig, aux: bool) -> (ParamStore, R2p, BankTensors, Vec<Scene>) {
        let data = DataConfig::default();
        let scenes = generate_dataset(5, 24, &data.mix, data.dims).unwrap();
        let bank = build_bank(&futures_matrix(&scenes), data.dims.t_fut, 4, 4, BuildMode::Clustered, 1, cfg.d_emb).unwrap();
        let mut store = ParamStore::new(9);
        let model = R2p::new(&mut store, cfg, data.dims, aux, 9).unwrap();
        (store, model, BankTensors::new(&bank), scenes)
    }

    #[test]
    fn forward_shapes_and_finite_loss() {
        let cfg = ModelConfig::default();
        let (store, model, bank, scenes) = setup(&cfg, false);
        model.check_bank(&bank).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &store, &bank, &scenes[0], StepOptions { tau: 1.0, noise_seed: Some(3) }).unwrap();
        assert_eq!(g.shape(fwd.heads.kin), (6 * 30, 7));
        assert_eq!(g.shape(fwd.anchor_endpoints), (6, 2));
        let (loss, b) = model.loss(&mut g, &fwd, &scenes[0], &LossConfig::default()).unwrap();
        assert!(g.value(loss).item().is_finite());
        assert!(b.offset > 0.0);
        assert!((b.total - (b.motion + 0.1 * b.endpoint + b.diversity + 0.1 * b.offset)).abs() < 1e-9);
        let pred = Prediction::from_forward(&g, &fwd, 1.0);
        assert!((pred.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (r, &i) in pred.selected.iter().enumerate() {
            assert_eq!(pred.anchor_trajectories.row(r), bank.trajectories.row(i));
        }
    }

    #[test]
    fn offsets_are_decoupled_from_decoder() {
        let cfg = ModelConfig::default();
        let (mut store, model, bank, scenes) = setup(&cfg, false);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, store, &bank, &scenes[1], StepOptions { tau: 1.0, noise_seed: None }).unwrap();
            g.value(fwd.heads.offsets).clone()
        };
        let before = run(&store);
        for id in store.group("decoder.") {
            store.get_mut(id).data_mut()[0] += 1e-3;
        }
        assert_eq!(run(&store), before);
    }

    #[test]
    fn grouping_runs_when_queries_exceed_modes() {
        let cfg = ModelConfig { n_q: 10, k: 6, ..ModelConfig::default() };
        let (store, model, bank, scenes) = setup(&cfg, true);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &store, &bank, &scenes[2], StepOptions { tau: 0.5, noise_seed: Some(1) }).unwrap();
        let p = fwd.pgqa.as_ref().unwrap();
        assert_eq!(g.shape(p.grouped), (6, 32));
        assert_eq!(g.shape(fwd.heads.offsets), (10, 2));
        assert_eq!(g.shape(fwd.heads.kin), (6 * 30, 7));
        let lc = LossConfig { aux_weight: 0.5, ..LossConfig::default() };
        let (_, b) = model.loss(&mut g, &fwd, &scenes[2], &lc).unwrap();
        assert!(b.aux_neighbor > 0.0 && b.entropy > 0.0);
    }

    #[test]
    fn mix_seed_separates_words() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[7, 7]), mix_seed(&[7, 7]));
    }
}
