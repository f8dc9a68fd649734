//! The motion bank: a frozen key-value store of future trajectories and their
//! unit-norm embeddings.

mod embed;
mod io;
mod kmeans;

pub use embed::{cosine, embed_trajectory, feature_dim, orthonormal_rows, trajectory_features, EmbeddingProjection, EMBED_BIAS};
pub use io::{decode_bank, encode_bank, read_bank, write_bank, BANK_MAGIC};
pub use kmeans::{kmeans, KMeans, KMEANS_ITERS};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    Clustered,
    Random,
}

impl BuildMode {
    pub fn code(self) -> u32 {
        match self {
            BuildMode::Clustered => 0,
            BuildMode::Random => 1,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(BuildMode::Clustered),
            1 => Some(BuildMode::Random),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionBank {
    /// `[B × (T_f · 2)]`, each row a flattened agent-frame future path.
    pub trajectories: Tensor,
    /// `[B × D_emb]`, unit rows.
    pub embeddings: Tensor,
    pub t_fut: usize,
    pub n_clusters: usize,
    pub n_elements: usize,
    pub build_mode: BuildMode,
    pub projection_seed: u32,
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|x| x as f32 as f64)
}

impl MotionBank {
    pub fn len(&self) -> usize {
        self.trajectories.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_emb(&self) -> usize {
        self.embeddings.cols()
    }

    /// Trajectory `i` as `[T_f × 2]`.
    pub fn trajectory(&self, i: usize) -> Tensor {
        Tensor::from_vec(self.t_fut, 2, self.trajectories.row(i).to_vec())
    }

    pub fn endpoint(&self, i: usize) -> [f64; 2] {
        let r = self.trajectories.row(i);
        [r[2 * self.t_fut - 2], r[2 * self.t_fut - 1]]
    }

    /// CRC32 stored in the serialized bank; recorded at build time and
    /// re-checked whenever a checkpoint is loaded.
    pub fn checksum(&self) -> u32 {
        let bytes = encode_bank(self);
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.len();
        if b != self.n_clusters * self.n_elements {
            return Err(Error::Format(format!("B = {b} but topology is {}x{}", self.n_clusters, self.n_elements)));
        }
        if self.embeddings.rows() != b || self.trajectories.cols() != 2 * self.t_fut {
            return Err(Error::Format("bank array shapes disagree".into()));
        }
        if !self.trajectories.is_finite() || !self.embeddings.is_finite() {
            return Err(Error::Format("bank contains non-finite values".into()));
        }
        for i in 0..b {
            let n = self.embeddings.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Format(format!("embedding {i} has norm {n}")));
            }
        }
        Ok(())
    }
}

/// Builds a bank from `futures` (`[M × (T_f·2)]`, agent frame).
///
/// Clustered mode runs k-means with `n_clusters` centroids and keeps, for
/// each cluster, the `n_elements` members closest to its centroid. A cluster
/// with too few members is topped up with the closest not-yet-chosen
/// futures from the whole set. Random mode draws `B` futures uniformly
/// without replacement.
pub fn build_bank(
    futures: &Tensor,
    t_fut: usize,
    n_clusters: usize,
    n_elements: usize,
    mode: BuildMode,
    seed: u64,
    d_emb: usize,
) -> Result<MotionBank> {
    let m = futures.rows();
    let b = n_clusters * n_elements;
    if n_clusters == 0 || n_elements == 0 {
        return Err(Error::invalid("bank topology must be positive"));
    }
    if m < b {
        return Err(Error::invalid(format!("{m} futures cannot fill a bank of {b}")));
    }
    if futures.cols() != 2 * t_fut {
        return Err(Error::invalid(format!("futures have {} columns, expected {}", futures.cols(), 2 * t_fut)));
    }
    if !futures.is_finite() {
        return Err(Error::invalid("futures contain non-finite values"));
    }
    let chosen: Vec<usize> = match mode {
        BuildMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, m, b).into_vec()
        }
        BuildMode::Clustered => {
            let km = kmeans(futures, n_clusters, KMEANS_ITERS, seed);
            let mut taken = vec![false; m];
            let mut out = Vec::with_capacity(b);
            for c in 0..n_clusters {
                let centroid = km.centroids.row(c);
                let dist = |i: usize| -> f64 { futures.row(i).iter().zip(centroid).map(|(x, y)| (x - y) * (x - y)).sum() };
                let mut members: Vec<usize> = (0..m).filter(|&i| km.labels[i] == c && !taken[i]).collect();
                members.sort_by(|&i, &j| dist(i).total_cmp(&dist(j)).then(i.cmp(&j)));
                members.truncate(n_elements);
                if members.len() < n_elements {
                    let mut rest: Vec<usize> = (0..m).filter(|&i| km.labels[i] != c && !taken[i]).collect();
                    rest.sort_by(|&i, &j| dist(i).total_cmp(&dist(j)).then(i.cmp(&j)));
                    members.extend(rest.into_iter().take(n_elements - members.len()));
                }
                for &i in &members {
                    taken[i] = true;
                }
                out.extend(members);
            }
            out
        }
    };
    let mut traj = Tensor::zeros(b, 2 * t_fut);
    for (r, &i) in chosen.iter().enumerate() {
        traj.row_mut(r).copy_from_slice(futures.row(i));
    }
    let trajectories = round_f32(&traj);
    let projection_seed = (seed & 0xffff_ffff) as u32;
    let proj = EmbeddingProjection::new(t_fut, d_emb, u64::from(projection_seed));
    let mut emb = Tensor::zeros(b, d_emb);
    for r in 0..b {
        let t = Tensor::from_vec(t_fut, 2, trajectories.row(r).to_vec());
        emb.row_mut(r).copy_from_slice(&proj.embed(&t));
    }
    let bank = MotionBank {
        trajectories,
        embeddings: round_f32(&emb),
        t_fut,
        n_clusters,
        n_elements,
        build_mode: mode,
        projection_seed,
    };
    bank.validate()?;
    Ok(bank)
}

/// Exhaustive nearest bank entry by mean per-step Euclidean distance; ties
/// go to the lowest index.
pub fn nearest_anchor_oracle(bank: &MotionBank, future: &Tensor) -> Result<(usize, f64)> {
    if bank.is_empty() {
        return Err(Error::invalid("empty bank"));
    }
    let t = bank.t_fut;
    if future.len() != 2 * t {
        return Err(Error::invalid(format!("future has {} values, expected {}", future.len(), 2 * t)));
    }
    let f = future.data();
    let mut best = (0, f64::INFINITY);
    for i in 0..bank.len() {
        let r = bank.trajectories.row(i);
        let d = (0..t).map(|s| (r[2 * s] - f[2 * s]).hypot(r[2 * s + 1] - f[2 * s + 1])).sum::<f64>() / t as f64;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Flattened `[M × (T_f·2)]` target futures of a scene set.
pub fn futures_matrix(scenes: &[crate::scene::Scene]) -> Tensor {
    let t = scenes.first().map_or(0, |s| s.dims.t_fut);
    let mut out = Tensor::zeros(scenes.len(), 2 * t);
    for (i, s) in scenes.iter().enumerate() {
        out.row_mut(i).copy_from_slice(s.future_positions().data());
    }
    out
}
