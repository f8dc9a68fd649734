use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentType, Dims, Pose, Scene, AGENT_FEATS, FUTURE_FEATS, LANE_FEATS, LIGHT_FEATS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type Nested3 = Vec<Vec<Vec<f64>>>;

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    target_history: Vec<Vec<f64>>,
    neighbor_histories: Nested3,
    lane_polylines: Nested3,
    traffic_lights: Nested3,
    target_future: Vec<Vec<f64>>,
    neighbor_futures: Nested3,
    #[serde(default)]
    neighbor_future_valid: Option<Vec<Vec<u8>>>,
    agent_type: AgentType,
    frame_pose: Pose,
    dims: Dims,
}

fn to_2d(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn to_3d(t: &Tensor, outer: usize) -> Nested3 {
    let inner = t.rows() / outer;
    (0..outer).map(|o| (0..inner).map(|r| t.row(o * inner + r).to_vec()).collect()).collect()
}

fn from_2d(name: &str, v: &[Vec<f64>], rows: usize, cols: usize) -> Result<Tensor> {
    if v.len() != rows || v.iter().any(|r| r.len() != cols) {
        return Err(Error::Format(format!("{name}: expected {rows}x{cols}")));
    }
    Ok(Tensor::from_vec(rows, cols, v.iter().flatten().copied().collect()))
}

fn from_3d(name: &str, v: &Nested3, outer: usize, rows: usize, cols: usize) -> Result<Tensor> {
    if v.len() != outer || v.iter().any(|m| m.len() != rows || m.iter().any(|r| r.len() != cols)) {
        return Err(Error::Format(format!("{name}: expected {outer}x{rows}x{cols}")));
    }
    Ok(Tensor::from_vec(outer * rows, cols, v.iter().flatten().flatten().copied().collect()))
}

impl SceneRecord {
    fn from_scene(s: &Scene) -> Self {
        let d = s.dims;
        Self {
            target_history: to_2d(&s.target_history),
            neighbor_histories: to_3d(&s.neighbor_histories, d.n_agents),
            lane_polylines: to_3d(&s.lane_polylines, d.n_lanes),
            traffic_lights: to_3d(&s.traffic_lights, d.n_lights),
            target_future: to_2d(&s.target_future),
            neighbor_futures: to_3d(&s.neighbor_futures, d.n_agents),
            neighbor_future_valid: Some(
                s.neighbor_future_valid.chunks(d.t_fut).map(|c| c.iter().map(|&b| u8::from(b)).collect()).collect(),
            ),
            agent_type: s.agent_type,
            frame_pose: s.frame_pose,
            dims: d,
        }
    }

    fn into_scene(self) -> Result<Scene> {
        let d = self.dims;
        d.validate().map_err(|e| Error::Format(e.to_string()))?;
        let neighbor_future_valid = match self.neighbor_future_valid {
            Some(v) => {
                if v.len() != d.n_agents || v.iter().any(|r| r.len() != d.t_fut) {
                    return Err(Error::Format(format!("neighbor_future_valid: expected {}x{}", d.n_agents, d.t_fut)));
                }
                v.into_iter().flatten().map(|b| b != 0).collect()
            }
            None => vec![true; d.n_agents * d.t_fut],
        };
        let scene = Scene {
            target_history: from_2d("target_history", &self.target_history, d.t_hist, AGENT_FEATS)?,
            neighbor_histories: from_3d("neighbor_histories", &self.neighbor_histories, d.n_agents, d.t_hist, AGENT_FEATS)?,
            lane_polylines: from_3d("lane_polylines", &self.lane_polylines, d.n_lanes, d.lane_nodes, LANE_FEATS)?,
            traffic_lights: from_3d("traffic_lights", &self.traffic_lights, d.n_lights, d.t_hist, LIGHT_FEATS)?,
            target_future: from_2d("target_future", &self.target_future, d.t_fut, FUTURE_FEATS)?,
            neighbor_futures: from_3d("neighbor_futures", &self.neighbor_futures, d.n_agents, d.t_fut, 2)?,
            neighbor_future_valid,
            agent_type: self.agent_type,
            frame_pose: self.frame_pose,
            dims: d,
        };
        scene.check_consistency()?;
        Ok(scene)
    }
}

/// Writes one JSON object per line. All scenes must share dimensions.
pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    if let Some(first) = scenes.first() {
        if let Some(bad) = scenes.iter().position(|s| s.dims != first.dims) {
            return Err(Error::Format(format!("scene {bad} has dims {:?}, expected {:?}", scenes[bad].dims, first.dims)));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, &SceneRecord::from_scene(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a scene file. Blank lines are skipped; a malformed line is reported
/// with its 1-based line number.
pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let scene = rec.into_scene().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(scene);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Intent, KinematicProfile};

    fn mix() -> Vec<(KinematicProfile, f64)> {
        vec![
            (KinematicProfile::new(Intent::LeftTurn, (5.0, 9.0), (12.0, 25.0), 0.1), 0.5),
            (KinematicProfile::new(Intent::Straight, (5.0, 14.0), (10.0, 10.0), 0.1), 0.5),
        ]
    }

    #[test]
    fn round_trip_three_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let scenes: Vec<_> = (0..3).map(|i| generate_scene(i, &mix(), Dims::DESK).unwrap()).collect();
        write_scenes(&p, &scenes).unwrap();
        let back = read_scenes(&p).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            for (x, y) in [
                (&a.target_history, &b.target_history),
                (&a.neighbor_histories, &b.neighbor_histories),
                (&a.lane_polylines, &b.lane_polylines),
                (&a.traffic_lights, &b.traffic_lights),
                (&a.target_future, &b.target_future),
                (&a.neighbor_futures, &b.neighbor_futures),
            ] {
                assert!(x.zip_map(y, |p, q| (p - q).abs()).max_abs() <= 1e-6);
            }
            assert_eq!(a.neighbor_future_valid, b.neighbor_future_valid);
            assert_eq!(a.agent_type, b.agent_type);
        }
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(read_scenes(&p).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let scenes: Vec<_> = (0..2).map(|i| generate_scene(i, &mix(), Dims::DESK).unwrap()).collect();
        write_scenes(&p, &scenes).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[1][..lines[1].len() / 2];
        lines[1] = cut;
        std::fs::write(&p, lines.join("\n")).unwrap();
        match read_scenes(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_dims_refused_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_scene(0, &mix(), Dims::DESK).unwrap();
        let b = generate_scene(0, &mix(), Dims { n_lanes: 4, ..Dims::DESK }).unwrap();
        assert!(matches!(write_scenes(dir.path().join("m.jsonl"), &[a, b]), Err(Error::Format(_))));
    }
}
