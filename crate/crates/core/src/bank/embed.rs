//! Frozen geometric embedding of trajectories.
//!
//! A geometric feature vector is mapped through a fixed random matrix with
//! orthonormal rows (or orthonormal columns when the embedding is wider than
//! the feature vector), passed through seeded random Fourier features
//! `cos(s·x + φ)` and ℓ2-normalized. The cosine of two embeddings then
//! approximates a Gaussian kernel of their trajectory distance, so distant
//! trajectories are close to orthogonal instead of sharing one direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Constant feature appended to every trajectory so that trajectories that
/// differ only by scale (same path, different speed) do not collapse onto
/// the same direction after normalization. Metres.
pub const EMBED_BIAS: f64 = 50.0;

pub fn feature_dim(t_fut: usize) -> usize {
    2 * t_fut + 4
}

/// Flattened positions, endpoint, mean heading, constant bias.
pub fn trajectory_features(traj: &Tensor) -> Vec<f64> {
    let t = traj.rows();
    let mut f = Vec::with_capacity(feature_dim(t));
    f.extend_from_slice(traj.data());
    let (ex, ey) = if t > 0 { (traj.get(t - 1, 0), traj.get(t - 1, 1)) } else { (0.0, 0.0) };
    f.push(ex);
    f.push(ey);
    let (mut prev_x, mut prev_y) = (0.0, 0.0);
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..t {
        let (x, y) = (traj.get(r, 0), traj.get(r, 1));
        let (dx, dy) = (x - prev_x, y - prev_y);
        if dx.hypot(dy) > 1e-6 {
            sum += dy.atan2(dx);
            n += 1;
        }
        prev_x = x;
        prev_y = y;
    }
    f.push(if n > 0 { sum / n as f64 } else { 0.0 });
    f.push(EMBED_BIAS);
    f
}

/// Modified Gram–Schmidt on the rows of `m`; returns orthonormal rows.
fn orthonormalize_rows(m: &mut Tensor) {
    for i in 0..m.rows() {
        for j in 0..i {
            let d: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            let rj = m.row(j).to_vec();
            for (a, b) in m.row_mut(i).iter_mut().zip(&rj) {
                *a -= d * b;
            }
        }
        let n = m.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in m.row_mut(i) {
            *a /= n;
        }
    }
}

/// Seeded `rows × cols` matrix with orthonormal rows (QR of a Gaussian
/// matrix). Requires `rows ≤ cols`.
pub fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    assert!(rows <= cols, "cannot have {rows} orthonormal rows in {cols} dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect());
    orthonormalize_rows(&mut m);
    m
}

/// RMS per-step distance, m, at which the kernel similarity of two
/// trajectories falls to `exp(-1/2)`.
pub const EMBED_LENGTH: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct EmbeddingProjection {
    /// `[D_emb × F]`
    matrix: Tensor,
    phases: Vec<f64>,
    scale: f64,
}

impl EmbeddingProjection {
    pub fn new(t_fut: usize, d_emb: usize, seed: u64) -> Self {
        let f = feature_dim(t_fut);
        let matrix = if d_emb <= f {
            orthonormal_rows(d_emb, f, seed)
        } else {
            orthonormal_rows(f, d_emb, seed).transpose()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a5e);
        let phases = (0..d_emb).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let scale = (f as f64).sqrt() / (EMBED_LENGTH * (t_fut as f64).sqrt());
        Self { matrix, phases, scale }
    }

    pub fn d_emb(&self) -> usize {
        self.matrix.rows()
    }

    pub fn embed(&self, traj: &Tensor) -> Vec<f64> {
        let f = Tensor::row_vector(trajectory_features(traj));
        let mut e = f.matmul_t(&self.matrix).into_vec();
        for (x, b) in e.iter_mut().zip(&self.phases) {
            *x = (*x * self.scale + b).cos();
        }
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            let mut basis = vec![0.0; e.len()];
            basis[0] = 1.0;
            return basis;
        }
        for x in &mut e {
            *x /= n;
        }
        e
    }
}

/// Unit-norm embedding of one `[T_f × 2]` trajectory.
pub fn embed_trajectory(traj: &Tensor, projection_seed: u64, d_emb: usize) -> Vec<f64> {
    EmbeddingProjection::new(traj.rows(), d_emb, projection_seed).embed(traj)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn arc(speed: f64, curvature: f64, t_fut: usize) -> Tensor {
        let mut t = Tensor::zeros(t_fut, 2);
        for k in 0..t_fut {
            let s = speed * 0.1 * (k + 1) as f64;
            let (x, y) = if curvature.abs() < 1e-12 {
                (s, 0.0)
            } else {
                ((curvature * s).sin() / curvature, (1.0 - (curvature * s).cos()) / curvature)
            };
            t.set(k, 0, x);
            t.set(k, 1, y);
        }
        t
    }

    #[test]
    fn rows_are_orthonormal() {
        let m = orthonormal_rows(6, 20, 3);
        let g = m.matmul_t(&m);
        assert!(g.zip_map(&Tensor::identity(6), |a, b| (a - b).abs()).max_abs() < 1e-12);
        let wide = EmbeddingProjection::new(5, 128, 1);
        assert_eq!(wide.d_emb(), 128);
    }

    #[test]
    fn unit_norm_and_identical_inputs() {
        for (v, k) in [(3.0, 0.0), (9.0, 0.05), (12.0, -0.08), (0.0, 0.0)] {
            let t = arc(v, k, 30);
            let e = embed_trajectory(&t, 7, 32);
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            let e2 = embed_trajectory(&t.clone(), 7, 32);
            assert_eq!(e, e2);
            assert!((cosine(&e, &e2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_features_fall_back_to_first_basis_vector() {
        let p = EmbeddingProjection::new(3, 4, 0);
        assert_eq!(p.embed(&Tensor::from_vec(3, 2, vec![f64::NAN; 6])), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn nearby_endpoints_embed_closer_than_distant_ones() {
        let proj = EmbeddingProjection::new(30, 32, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let v: f64 = rng.random_range(4.0..12.0);
            let k: f64 = rng.random_range(-0.06..0.06);
            let base = arc(v, k, 30);
            // 0.5 m endpoint gap: a slightly faster copy of the same path.
            let near = arc(v + 0.5 / 3.0, k, 30);
            // 40 m endpoint gap: much faster along the same path.
            let far = arc(v + 40.0 / 3.0, k, 30);
            let gap = |a: &Tensor, b: &Tensor| (a.get(29, 0) - b.get(29, 0)).hypot(a.get(29, 1) - b.get(29, 1));
            assert!(gap(&base, &near) < 0.6 && gap(&base, &far) > 20.0);
            let (eb, en, ef) = (proj.embed(&base), proj.embed(&near), proj.embed(&far));
            assert!(cosine(&eb, &en) > cosine(&eb, &ef));
        }
    }

    #[test]
    fn distant_trajectories_are_spread_apart() {
        let proj = EmbeddingProjection::new(30, 32, 5);
        let slow = proj.embed(&arc(2.0, 0.0, 30));
        let fast = proj.embed(&arc(14.0, 0.0, 30));
        let left = proj.embed(&arc(8.0, 0.08, 30));
        assert!(cosine(&slow, &fast) < 0.5);
        assert!(cosine(&fast, &left) < 0.5);
    }
}
