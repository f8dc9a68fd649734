//! Evaluation outputs: constant-velocity baseline, metrics report, attention
//! dump, plot data and ablation presets.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::bank::{build_bank, futures_matrix, BuildMode, MotionBank};
use crate::config::{RetrievalMode, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{mean_metrics, sample_metrics, SampleMetrics};
use crate::retrieval::Modality;
use crate::scene::{generate_dataset, Scene, DT};
use crate::tensor::Tensor;
use crate::train::{EpochRow, SceneOutput, REPORT_HEADER};

/// Synthetic train and eval splits described by `cfg.data`.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let d = &cfg.data;
    Ok((generate_dataset(d.train_seed, d.n_train, &d.mix, d.dims)?, generate_dataset(d.eval_seed, d.n_eval, &d.mix, d.dims)?))
}

/// Bank over the training futures with the topology and mode of `cfg.bank`.
pub fn configured_bank(cfg: &RunConfig, train: &[Scene]) -> Result<MotionBank> {
    let b = &cfg.bank;
    build_bank(&futures_matrix(train), cfg.data.dims.t_fut, b.n_clusters, b.n_elements, b.mode, b.seed, cfg.model.d_emb)
}

/// Fails with `Mismatch` when a bank file was built for another topology
/// or horizon than the config describes.
pub fn check_bank_matches(cfg: &RunConfig, bank: &MotionBank) -> Result<()> {
    let b = &cfg.bank;
    if (bank.n_clusters, bank.n_elements) != (b.n_clusters, b.n_elements) || bank.t_fut != cfg.data.dims.t_fut {
        return Err(Error::Mismatch(format!(
            "bank is {}x{} with T_f = {}, config wants {}x{} with T_f = {}",
            bank.n_clusters, bank.n_elements, bank.t_fut, b.n_clusters, b.n_elements, cfg.data.dims.t_fut
        )));
    }
    Ok(())
}

/// Extrapolates the last observed speed along the agent-frame heading.
pub fn constant_velocity(scene: &Scene) -> Tensor {
    let (x, y, h, v) = scene.last_observed();
    let t = scene.dims.t_fut;
    Tensor::from_vec(t, 2, (1..=t).flat_map(|s| [x + v * h.cos() * s as f64 * DT, y + v * h.sin() * s as f64 * DT]).collect())
}

pub fn baseline_metrics(scenes: &[Scene]) -> Result<SampleMetrics> {
    let rows = scenes.iter().map(|s| sample_metrics(&constant_velocity(s), &[1.0], &s.future_positions())).collect::<Result<Vec<_>>>()?;
    Ok(mean_metrics(&rows))
}

pub fn write_report(path: impl AsRef<Path>, rows: &[EpochRow], append: bool) -> Result<()> {
    let path = path.as_ref();
    let fresh = !append || !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(path)?;
    if fresh {
        writeln!(f, "{REPORT_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AttentionRecord<'a> {
    pub scene_id: usize,
    pub query_idx: usize,
    pub modality: Modality,
    pub element_idx: &'a [i64],
    pub weight: &'a [f64],
    /// `(target, neighbors, map, null)`
    pub routing_weights: [f64; 4],
    pub selected_bank_idx: usize,
}

/// One JSON line per (scene, query, modality).
pub fn attention_dump(outputs: &[SceneOutput]) -> Result<String> {
    let mut s = String::new();
    for (scene_id, o) in outputs.iter().enumerate() {
        for t in &o.attention {
            let rec = AttentionRecord {
                scene_id,
                query_idx: t.query,
                modality: t.modality,
                element_idx: &t.elements,
                weight: &t.weights,
                routing_weights: o.routing,
                selected_bank_idx: o.prediction.selected[t.query],
            };
            s.push_str(&serde_json::to_string(&rec)?);
            s.push('\n');
        }
    }
    Ok(s)
}

pub const PLOT_HEADER: &str = "scene_id,kind,index,weight,end_x,end_y,refined_x,refined_y,points";

fn points(traj: &[f64]) -> String {
    traj.chunks(2).map(|p| format!("{:.4} {:.4}", p[0], p[1])).collect::<Vec<_>>().join(";")
}

/// Per scene: `N_q` anchor rows, `K` prediction rows and one ground-truth
/// row. Points are `x y` pairs separated by `;`.
pub fn plot_data(scenes: &[Scene], outputs: &[SceneOutput]) -> String {
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for (id, (scene, o)) in scenes.iter().zip(outputs).enumerate() {
        let p = &o.prediction;
        for q in 0..p.anchor_trajectories.rows() {
            let (ex, ey) = (p.anchor_endpoints.get(q, 0), p.anchor_endpoints.get(q, 1));
            let (rx, ry) = (ex + p.offsets.get(q, 0), ey + p.offsets.get(q, 1));
            let _ = writeln!(s, "{id},anchor,{q},1,{ex:.4},{ey:.4},{rx:.4},{ry:.4},{}", points(p.anchor_trajectories.row(q)));
        }
        let t = scene.dims.t_fut;
        for (k, &c) in p.confidences.iter().enumerate() {
            let traj = &p.positions.data()[2 * k * t..2 * (k + 1) * t];
            let (ex, ey) = (traj[2 * t - 2], traj[2 * t - 1]);
            let _ = writeln!(s, "{id},prediction,{k},{c:.6},{ex:.4},{ey:.4},{ex:.4},{ey:.4},{}", points(traj));
        }
        let gt = scene.future_positions();
        let [ex, ey] = scene.future_endpoint();
        let _ = writeln!(s, "{id},ground_truth,0,1,{ex:.4},{ey:.4},{ex:.4},{ey:.4},{}", points(gt.data()));
    }
    s
}

pub const PRESETS: [&str; 6] = ["bank-mode", "bank-topology", "retrieval", "gates", "queries", "map"];

/// Named config variants along one ablation axis, scaled to desk size.
pub fn preset(name: &str, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label.to_string(), c)
    };
    let variants = match name {
        "bank-mode" => vec![
            with("clustered", &|c| c.bank.mode = BuildMode::Clustered),
            with("random", &|c| c.bank.mode = BuildMode::Random),
        ],
        "bank-topology" => vec![
            with("4x16", &|c| (c.bank.n_clusters, c.bank.n_elements) = (4, 16)),
            with("8x8", &|c| (c.bank.n_clusters, c.bank.n_elements) = (8, 8)),
            with("8x16", &|c| (c.bank.n_clusters, c.bank.n_elements) = (8, 16)),
            with("flat", &|c| c.bank.mode = BuildMode::Random),
        ],
        "retrieval" => vec![
            with("st", &|c| c.model.retrieval = RetrievalMode::St),
            with("soft", &|c| c.model.retrieval = RetrievalMode::Soft),
        ],
        "gates" => vec![
            with("target+other", &|c| (c.model.use_target, c.model.use_neighbors, c.model.use_map) = (true, true, false)),
            with("target", &|c| (c.model.use_target, c.model.use_neighbors, c.model.use_map) = (true, false, false)),
            with("other", &|c| (c.model.use_target, c.model.use_neighbors, c.model.use_map) = (false, true, false)),
            with("target+map+other", &|c| (c.model.use_target, c.model.use_neighbors, c.model.use_map) = (true, true, true)),
            with("none", &|c| (c.model.use_target, c.model.use_neighbors, c.model.use_map) = (false, false, false)),
        ],
        "queries" => [6, 16, 32].iter().map(|&n| with(&format!("nq{n}"), &|c| c.model.n_q = n)).collect(),
        "map" => vec![with("no-map", &|c| c.model.use_map = false), with("map", &|c| c.model.use_map = true)],
        _ => return Err(Error::invalid(format!("unknown preset {name:?}, expected one of {}", PRESETS.join(", ")))),
    };
    for (_, c) in &variants {
        c.validate()?;
    }
    Ok(variants)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_dataset;

    #[test]
    fn constant_velocity_is_exact_for_straight_constant_speed() {
        let cfg = RunConfig::default();
        let scenes = generate_dataset(4, 40, &cfg.data.mix, cfg.data.dims).unwrap();
        for s in &scenes {
            let cv = constant_velocity(s);
            let (x, y, _, v) = s.last_observed();
            let d = (cv.get(0, 0) - x).hypot(cv.get(0, 1) - y);
            assert!((d - v * DT).abs() < 1e-9);
        }
        assert!(baseline_metrics(&scenes).unwrap().min_ade6 > 0.0);
    }

    #[test]
    fn presets_are_valid() {
        let base = RunConfig::default();
        for p in PRESETS {
            assert!(preset(p, &base).unwrap().len() >= 2);
        }
        assert!(matches!(preset("nope", &base), Err(Error::InvalidArgument(_))));
    }
}
