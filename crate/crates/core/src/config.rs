//! Run configuration: JSON file plus `R2P_` environment overrides.
//!
//! An override variable names a dotted path with `__` between levels, e.g.
//! `R2P_TRAIN__EPOCHS=3` or `R2P_MODEL__RETRIEVAL=soft`. Its value is parsed
//! as JSON and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bank::BuildMode;
use crate::error::{Error, Result};
use crate::params::fnv1a;
use crate::scene::{AgentType, Dims, Intent, KinematicProfile, ProfileMix};

pub const ENV_PREFIX: &str = "R2P_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Hard one-hot selection forward, softmax gradient backward.
    St,
    /// Probability-weighted blend of bank rows.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_q: usize,
    pub k: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ff_mult: usize,
    pub d_emb: usize,
    /// PGQA assignment temperature, m².
    pub tau_g: f64,
    pub retrieval: RetrievalMode,
    /// Gumbel noise on the bank logits during training.
    pub gumbel: bool,
    /// Forbid two queries from selecting the same bank row.
    pub unique: bool,
    pub use_target: bool,
    pub use_neighbors: bool,
    pub use_map: bool,
    /// Predict kinematic means as offsets from the query's anchor.
    pub kin_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_q: 6,
            k: 6,
            heads: 4,
            enc_layers: 2,
            dec_layers: 3,
            ff_mult: 2,
            d_emb: 32,
            tau_g: 1.0,
            retrieval: RetrievalMode::St,
            gumbel: true,
            unique: false,
            use_target: true,
            use_neighbors: true,
            use_map: false,
            kin_residual: false,
        }
    }
}

/// Per-agent-type weights, indexed by [`AgentType::index`].
pub type TypeWeights = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_motion: f64,
    pub lambda_div: f64,
    pub w_pos: TypeWeights,
    pub w_vel: TypeWeights,
    pub w_yaw: TypeWeights,
    pub w_conf: TypeWeights,
    pub endpoint_weight: f64,
    /// Soft-min temperature of the endpoint loss, m.
    pub tau_e: f64,
    pub huber_delta: f64,
    pub entropy_weight: f64,
    pub aux_weight: f64,
    /// Weight of the offset-magnitude penalty.
    pub offset_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_motion: 1.0,
            lambda_div: 0.1,
            w_pos: [1.0; 3],
            w_vel: [0.5; 3],
            w_yaw: [0.5; 3],
            w_conf: [1.0; 3],
            endpoint_weight: 0.1,
            tau_e: 1.0,
            huber_delta: 1.0,
            entropy_weight: 0.0,
            aux_weight: 0.0,
            offset_weight: 0.1,
        }
    }
}

impl LossConfig {
    pub fn weights(&self, t: AgentType) -> (f64, f64, f64, f64) {
        let i = t.index();
        (self.w_pos[i], self.w_vel[i], self.w_yaw[i], self.w_conf[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub tau0: f64,
    pub tau_f: f64,
    pub peak_lr: f64,
    pub div_init: f64,
    pub div_final: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; `null` disables it.
    pub grad_clip: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            tau0: 5.0,
            tau_f: 0.25,
            peak_lr: 1.4e-3,
            div_init: 20.0,
            div_final: 50.0,
            warmup_frac: 0.25,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dims: Dims,
    pub n_train: usize,
    pub n_eval: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub mix: ProfileMix,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dims: Dims::DESK, n_train: 2000, n_eval: 200, train_seed: 1, eval_seed: 2, mix: three_intent_mix() }
    }
}

/// Left turn, straight and right turn with an unbalanced mix, so that a
/// random bank under-samples the turning modes.
pub fn three_intent_mix() -> ProfileMix {
    vec![
        (KinematicProfile::new(Intent::Straight, (4.0, 14.0), (10.0, 10.0), 0.05), 0.6),
        (KinematicProfile::new(Intent::LeftTurn, (5.0, 10.0), (14.0, 22.0), 0.05), 0.2),
        (KinematicProfile::new(Intent::RightTurn, (4.0, 8.0), (8.0, 12.0), 0.05), 0.2),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub n_clusters: usize,
    pub n_elements: usize,
    pub mode: BuildMode,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self { n_clusters: 8, n_elements: 8, mode: BuildMode::Clustered, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Confidence temperature at evaluation (0.5 sharpens).
    pub conf_temperature: f64,
    /// Evaluate on the eval split after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 32, seed: 0, conf_temperature: 1.0, eval_every_epoch: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub bank: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train: "data/train.jsonl".into(),
            eval: "data/eval.jsonl".into(),
            bank: "data/bank.bin".into(),
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub bank: BankConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        check(m.d > 0 && m.d_emb > 0, || "model widths must be positive".into())?;
        check(m.heads > 0 && m.d % m.heads == 0, || format!("d = {} not divisible by {} heads", m.d, m.heads))?;
        check(m.n_q >= 1 && m.n_q <= m.d, || format!("need 1 <= n_q <= d, got n_q = {}", m.n_q))?;
        check(m.k >= 1 && m.k <= m.n_q, || format!("need 1 <= k <= n_q, got k = {}", m.k))?;
        check(m.ff_mult >= 1, || "ff_mult must be at least 1".into())?;
        check(m.tau_g > 0.0, || "tau_g must be positive".into())?;
        let l = &self.loss;
        let ws = [l.lambda_motion, l.lambda_div, l.endpoint_weight, l.entropy_weight, l.aux_weight];
        check(ws.iter().chain(l.w_pos.iter()).chain(&l.w_vel).chain(&l.w_yaw).chain(&l.w_conf).all(|w| *w >= 0.0), || {
            "loss weights must be non-negative".into()
        })?;
        check(l.tau_e > 0.0 && l.huber_delta > 0.0, || "tau_e and huber_delta must be positive".into())?;
        let s = &self.schedule;
        check(s.tau0 > s.tau_f && s.tau_f > 0.0, || format!("need tau0 > tau_f > 0, got {} and {}", s.tau0, s.tau_f))?;
        check((0.0..1.0).contains(&s.warmup_frac), || "warmup_frac must lie in [0, 1)".into())?;
        check(s.div_init > 1.0 && s.div_final > 1.0, || "LR divisors must exceed 1".into())?;
        check(s.peak_lr > 0.0 && s.weight_decay >= 0.0, || "bad learning rate or weight decay".into())?;
        check((0.0..1.0).contains(&s.beta1) && (0.0..1.0).contains(&s.beta2), || "betas must lie in [0, 1)".into())?;
        check(s.grad_clip.is_none_or(|c| c > 0.0), || "grad_clip must be positive".into())?;
        self.data.dims.validate()?;
        check(self.bank.n_clusters > 0 && self.bank.n_elements > 0, || "bank topology must be positive".into())?;
        check(self.train.batch_size >= 1, || "batch size must be at least 1".into())?;
        check(self.train.conf_temperature > 0.0, || "conf_temperature must be positive".into())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        Ok(cfg)
    }

    /// Reads `path` (or defaults when `None`), applies `R2P_` variables from
    /// the process environment and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_json(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        let cfg = base.with_overrides(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, raw) in vars {
            let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|p| p.to_ascii_lowercase()).collect();
            let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
            let mut node = &mut v;
            for (i, key) in path.iter().enumerate() {
                let obj = node.as_object_mut().ok_or_else(|| Error::invalid(format!("{k}: {key} is not a section")))?;
                if !obj.contains_key(key) {
                    return Err(Error::invalid(format!("{k}: unknown key {key}")));
                }
                let slot = obj.get_mut(key).expect("present");
                if i + 1 == path.len() {
                    *slot = value.clone();
                }
                node = slot;
            }
        }
        serde_json::from_value(v).map_err(|e| Error::invalid(format!("override: {e}")))
    }

    /// Hash of everything that determines parameter shapes and meaning.
    pub fn model_hash(&self) -> u64 {
        let key = serde_json::json!({
            "model": self.model,
            "dims": self.data.dims,
            "bank": [self.bank.n_clusters, self.bank.n_elements],
            "aux_head": self.loss.aux_weight > 0.0,
        });
        fnv1a(key.to_string().as_bytes())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json_pretty()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn env_overrides_nested_keys() {
        let c = RunConfig::default()
            .with_overrides(vec![
                ("R2P_TRAIN__EPOCHS".to_string(), "3".to_string()),
                ("R2P_MODEL__RETRIEVAL".to_string(), "soft".to_string()),
                ("OTHER".to_string(), "x".to_string()),
            ])
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.retrieval, RetrievalMode::Soft);
        assert!(RunConfig::default().with_overrides(vec![("R2P_TRAIN__NOPE".into(), "1".into())]).is_err());
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let mut c = RunConfig::default();
        c.schedule.tau_f = 6.0;
        assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
        let mut c = RunConfig::default();
        c.model.k = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn model_hash_ignores_training_knobs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 1;
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.d = 64;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
