//! Training loop. Each batch computes per-sample gradients (in parallel
//! when enabled), sums them in sample order and takes one AdamW step, so a
//! run is bitwise reproducible from its seed regardless of thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bank::MotionBank;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{mean_metrics, sample_metrics, SampleMetrics};
use crate::model::{mix_seed, BankTensors, Prediction, R2p, StepOptions};
use crate::optim::{clip_global_norm, AdamW};
use crate::par::{map_slice_in, Exec};
use crate::params::ParamStore;
use crate::retrieval::{top_elements, Modality, TopElements};
use crate::scene::Scene;
use crate::schedule::{learning_rate, temperature};
use crate::tape::Graph;
use crate::tensor::Tensor;

/// One row of the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    pub metrics: SampleMetrics,
    pub loss: LossBreakdown,
    /// Mean over scenes of the closest selected-anchor endpoint to the GT
    /// endpoint, before offsets.
    pub anchor_distance: f64,
    pub tau: f64,
    pub lr: f64,
}

pub const REPORT_HEADER: &str = "epoch,split,min_ade1,min_ade6,min_fde1,min_fde6,miss_rate,brier_min_fde,loss_total,loss_motion,loss_nll,loss_vel,loss_yaw,loss_ce,loss_endpoint,loss_diversity,entropy,loss_aux_neighbor,loss_offset,anchor_distance,tau,lr";

impl EpochRow {
    pub fn csv(&self) -> String {
        let m = &self.metrics;
        let l = &self.loss;
        let vals = [
            m.min_ade1,
            m.min_ade6,
            m.min_fde1,
            m.min_fde6,
            m.miss_rate,
            m.brier_min_fde,
            l.total,
            l.motion,
            l.nll,
            l.vel,
            l.yaw,
            l.ce,
            l.endpoint,
            l.diversity,
            l.entropy,
            l.aux_neighbor,
            l.offset,
            self.anchor_distance,
            self.tau,
            self.lr,
        ];
        let body: Vec<String> = vals.iter().map(|v| format!("{v:.9e}")).collect();
        format!("{},{},{}", self.epoch, self.split, body.join(","))
    }
}

/// Everything one inference pass exposes about a scene.
#[derive(Clone, Debug)]
pub struct SceneOutput {
    pub prediction: Prediction,
    pub loss: LossBreakdown,
    pub routing: [f64; 4],
    pub attention: Vec<TopElements>,
    pub metrics: SampleMetrics,
}

pub struct Session {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub model: R2p,
    pub opt: AdamW,
    pub bank: BankTensors,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<EpochRow>,
}

impl Session {
    pub fn new(cfg: &RunConfig, bank: &MotionBank) -> Result<Self> {
        cfg.validate()?;
        let bank = BankTensors::new(bank);
        let mut store = ParamStore::new(cfg.train.seed);
        let model = R2p::new(&mut store, &cfg.model, cfg.data.dims, cfg.loss.aux_weight > 0.0, cfg.train.seed)?;
        model.check_bank(&bank)?;
        let s = &cfg.schedule;
        let opt = AdamW::new(&store, s.beta1, s.beta2, s.weight_decay);
        Ok(Self { cfg: cfg.clone(), store, model, opt, bank, epoch: 0, step: 0, history: Vec::new() })
    }

    pub fn restore(cfg: &RunConfig, bank: &MotionBank, ckpt: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(cfg, bank)?;
        ckpt.check_compatible(cfg.model_hash(), s.bank.checksum)?;
        ckpt.restore(&mut s.store)?;
        if let Some(o) = &ckpt.optimizer {
            s.opt = o.clone();
        }
        s.epoch = ckpt.epoch;
        s.step = ckpt.step;
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.store, Some(&self.opt), self.cfg.model_hash(), self.bank.checksum, self.epoch, self.step)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.train.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.cfg.train.epochs * self.steps_per_epoch(n)
    }

    pub fn tau_at(&self, step: usize, total: usize) -> f64 {
        temperature(step, total, self.cfg.schedule.tau0, self.cfg.schedule.tau_f)
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let s = &self.cfg.schedule;
        learning_rate(step, total, s.peak_lr, s.div_init, s.div_final, s.warmup_frac)
    }

    /// Forward and backward for one scene: loss breakdown, dense gradients,
    /// closest anchor distance and the sample's metrics.
    fn sample_grad(&self, scene: &Scene, opts: StepOptions) -> Result<(LossBreakdown, Vec<Tensor>, f64, SampleMetrics)> {
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, &self.store, &self.bank, scene, opts)?;
        let (loss, breakdown) = self.model.loss(&mut g, &fwd, scene, &self.cfg.loss)?;
        let grads = g.backward(loss).param_grads(&self.store);
        let pred = Prediction::from_forward(&g, &fwd, 1.0);
        let metrics = sample_metrics(&pred.positions, &pred.confidences, &scene.future_positions())?;
        Ok((breakdown, grads, pred.anchor_distance(scene.future_endpoint()), metrics))
    }

    /// Mean noise-free gradient over `scenes` at temperature `tau`, reduced
    /// in scene order so both execution modes agree bitwise.
    pub fn batch_gradients(&self, scenes: &[Scene], tau: f64, exec: Exec) -> Result<Vec<Tensor>> {
        let results = map_slice_in(exec, scenes, |s| self.sample_grad(s, StepOptions { tau, noise_seed: None }));
        let mut acc = self.store.zeros_like();
        for r in results {
            for (a, g) in acc.iter_mut().zip(&r?.1) {
                a.add_assign(g);
            }
        }
        acc.iter_mut().for_each(|a| a.scale_assign(1.0 / scenes.len().max(1) as f64));
        Ok(acc)
    }

    /// Runs one epoch over `scenes` and appends its train row to the history.
    pub fn train_epoch(&mut self, scenes: &[Scene]) -> Result<EpochRow> {
        if scenes.is_empty() {
            return Err(Error::invalid("no training scenes"));
        }
        let total = self.total_steps(scenes.len());
        let seed = self.cfg.train.seed;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, self.epoch as u64, 0x5f])));

        let mut sum = LossBreakdown::default();
        let mut metric_rows = Vec::with_capacity(scenes.len());
        let mut dist = 0.0;
        let (mut tau, mut lr) = (0.0, 0.0);
        for batch in order.chunks(self.cfg.train.batch_size) {
            tau = self.tau_at(self.step, total);
            lr = self.lr_at(self.step, total);
            let gumbel = self.cfg.model.gumbel;
            let step = self.step as u64;
            let results = crate::par::map_slice(batch, |&i| {
                let noise_seed = gumbel.then(|| mix_seed(&[seed, step, i as u64]));
                self.sample_grad(&scenes[i], StepOptions { tau, noise_seed })
            });
            let mut acc = self.store.zeros_like();
            let inv = 1.0 / batch.len() as f64;
            for r in results {
                let (b, grads, d, m) = r?;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g);
                }
                sum.add_scaled(&b, 1.0);
                dist += d;
                metric_rows.push(m);
            }
            acc.iter_mut().for_each(|a| a.scale_assign(inv));
            if acc.iter().any(|a| !a.is_finite()) {
                return Err(Error::NonFinite(format!("gradients at step {}", self.step)));
            }
            if let Some(c) = self.cfg.schedule.grad_clip {
                clip_global_norm(&mut acc, c);
            }
            self.opt.step(self.store.tensors_mut(), &acc, lr);
            self.step += 1;
        }
        self.epoch += 1;
        let n = scenes.len() as f64;
        let mut loss = LossBreakdown::default();
        loss.add_scaled(&sum, 1.0 / n);
        let row = EpochRow { epoch: self.epoch, split: "train".into(), metrics: mean_metrics(&metric_rows), loss, anchor_distance: dist / n, tau, lr };
        self.history.push(row.clone());
        Ok(row)
    }

    /// Noise-free inference on one scene at temperature `tau`.
    pub fn infer(&self, scene: &Scene, tau: f64, conf_temperature: f64) -> Result<SceneOutput> {
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, &self.store, &self.bank, scene, StepOptions { tau, noise_seed: None })?;
        let (_, loss) = self.model.loss(&mut g, &fwd, scene, &self.cfg.loss)?;
        let prediction = Prediction::from_forward(&g, &fwd, conf_temperature);
        let metrics = sample_metrics(&prediction.positions, &prediction.confidences, &scene.future_positions())?;
        let n_q = self.cfg.model.n_q;
        let map_mask: Vec<bool> = fwd.projected.lane_mask.iter().chain(&fwd.projected.light_mask).copied().collect();
        let masks = [&fwd.target_time_mask, &fwd.projected.neighbor_mask, &map_mask];
        let mut attention = Vec::new();
        for (i, m) in Modality::ALL.into_iter().enumerate() {
            if self.model.retrieval.pathways[i].is_none() {
                continue;
            }
            let w = fwd.adapted.attention[i].clone().unwrap_or_else(|| Tensor::zeros(n_q, masks[i].len()));
            let mask: Vec<bool> = if fwd.adapted.attention[i].is_some() { masks[i].clone() } else { vec![false; masks[i].len()] };
            attention.extend(top_elements(&w, &mask, m));
        }
        Ok(SceneOutput { prediction, loss, routing: fwd.adapted.routing, attention, metrics })
    }

    /// Current retrieval temperature for evaluation given the training set size.
    pub fn eval_tau(&self, n_train: usize) -> f64 {
        self.tau_at(self.step, self.total_steps(n_train))
    }

    pub fn evaluate(&self, scenes: &[Scene], tau: f64, conf_temperature: f64) -> Result<Vec<SceneOutput>> {
        crate::par::map_slice(scenes, |s| self.infer(s, tau, conf_temperature)).into_iter().collect()
    }

    pub fn eval_row(&self, outputs: &[SceneOutput], scenes: &[Scene], tau: f64) -> EpochRow {
        let n = outputs.len().max(1) as f64;
        let mut loss = LossBreakdown::default();
        let mut dist = 0.0;
        for (o, s) in outputs.iter().zip(scenes) {
            loss.add_scaled(&o.loss, 1.0 / n);
            dist += o.prediction.anchor_distance(s.future_endpoint());
        }
        let metrics: Vec<SampleMetrics> = outputs.iter().map(|o| o.metrics).collect();
        EpochRow { epoch: self.epoch, split: "eval".into(), metrics: mean_metrics(&metrics), loss, anchor_distance: dist / n, tau, lr: 0.0 }
    }
}

/// Controls for [`train`].
#[derive(Default)]
pub struct TrainOptions<'c> {
    pub resume: Option<&'c Checkpoint>,
    /// Stop after this many completed epochs (the schedule still spans
    /// `train.epochs`).
    pub stop_after: Option<usize>,
    /// Called after each epoch with the new rows; an error aborts training.
    pub on_epoch: Option<&'c mut dyn FnMut(&Session, &[EpochRow]) -> Result<()>>,
}

/// Trains from scratch or from a checkpoint, evaluating after every epoch
/// when configured and `eval` is non-empty.
pub fn train(cfg: &RunConfig, bank: &MotionBank, train_set: &[Scene], eval_set: &[Scene], mut opts: TrainOptions<'_>) -> Result<Session> {
    let mut s = match opts.resume {
        Some(c) => Session::restore(cfg, bank, c)?,
        None => Session::new(cfg, bank)?,
    };
    let end = opts.stop_after.unwrap_or(cfg.train.epochs).min(cfg.train.epochs);
    while s.epoch < end {
        let mut rows = vec![s.train_epoch(train_set)?];
        if cfg.train.eval_every_epoch && !eval_set.is_empty() {
            let tau = s.eval_tau(train_set.len());
            let out = s.evaluate(eval_set, tau, cfg.train.conf_temperature)?;
            let row = s.eval_row(&out, eval_set, tau);
            s.history.push(row.clone());
            rows.push(row);
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&s, &rows)?;
        }
    }
    Ok(s)
}
