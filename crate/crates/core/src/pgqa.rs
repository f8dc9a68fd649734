//! Prior-guided query aggregation: farthest-point seeds over anchor
//! endpoints, soft assignment of every anchor to a seed, and medoid
//! trajectories copied from the seeds.

use crate::error::{Error, Result};
use crate::tape::{argmax, Graph, Var};
use crate::tensor::Tensor;

pub struct PgqaOutput {
    /// `[K × D]`
    pub grouped: Var,
    /// `[K × 2T_f]`, rows copied from the seeds.
    pub medoids: Var,
    /// `[K × N]`
    pub assignment: Var,
    /// `[1 × 1]`
    pub entropy: Var,
    pub seeds: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Farthest point sampling over `[N × 2]` endpoints from `first`. Each step
/// takes the unchosen point with the largest distance to its nearest seed,
/// lowest index on ties.
pub fn farthest_point_seeds(endpoints: &Tensor, first: usize, k: usize) -> Result<Vec<usize>> {
    let n = endpoints.rows();
    if k > n {
        return Err(Error::invalid(format!("cannot pick {k} seeds from {n} anchors")));
    }
    if first >= n {
        return Err(Error::invalid(format!("first seed {first} out of range for {n} anchors")));
    }
    let mut seeds = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(endpoints.row(i), endpoints.row(first))).collect();
    while seeds.len() < k {
        let mut best = None;
        for i in 0..n {
            if seeds.contains(&i) {
                continue;
            }
            if best.is_none_or(|b: usize| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        let s = best.expect("k <= n leaves a candidate");
        seeds.push(s);
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(endpoints.row(i), endpoints.row(s)));
        }
    }
    Ok(seeds)
}

/// Groups `N` anchor tokens into `K` queries. `pi` is the `[N × B]`
/// retrieval distribution; the first seed is the anchor with the largest
/// row maximum.
pub fn pgqa(g: &mut Graph<'_>, tokens: Var, trajectories: Var, pi: &Tensor, k: usize, tau_g: f64) -> Result<PgqaOutput> {
    if tau_g <= 0.0 {
        return Err(Error::invalid("tau_g must be positive"));
    }
    let (n, w) = g.shape(trajectories);
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot group {n} anchors into {k} queries")));
    }
    let ends = g.slice_cols(trajectories, w - 2, 2);
    let conf: Vec<f64> = (0..pi.rows()).map(|r| pi.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let seeds = farthest_point_seeds(g.value(ends), argmax(&conf), k)?;

    let mut rows = Vec::with_capacity(k);
    for &s in &seeds {
        let seed = g.gather_rows(ends, &vec![s; n]);
        let diff = g.sub(ends, seed);
        let sq = g.square(diff);
        let d = g.sum_cols(sq);
        rows.push(g.transpose(d));
    }
    let d = g.concat_rows(&rows);
    let logits = g.scale(d, -1.0 / tau_g);
    let assignment = g.softmax_rows(logits);
    let log_a = g.log_softmax_rows(logits);
    let plogp = g.mul(assignment, log_a);
    let s = g.sum_all(plogp);
    let entropy = g.scale(s, -1.0 / k as f64);
    Ok(PgqaOutput {
        grouped: g.matmul(assignment, tokens),
        medoids: g.gather_rows(trajectories, &seeds),
        assignment,
        entropy,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn endpoints(xs: &[f64]) -> Tensor {
        Tensor::from_rows(&xs.iter().map(|&x| vec![x, 0.0]).collect::<Vec<_>>())
    }

    fn brute_next(e: &Tensor, chosen: &[usize]) -> f64 {
        (0..e.rows())
            .filter(|i| !chosen.contains(i))
            .map(|i| chosen.iter().map(|&s| sq_dist(e.row(i), e.row(s))).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn fps_picks_far_endpoint() {
        assert_eq!(farthest_point_seeds(&endpoints(&[0.0, 1.0, 10.0]), 0, 2).unwrap(), vec![0, 2]);
        assert!(matches!(farthest_point_seeds(&endpoints(&[0.0]), 0, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fps_each_step_is_max_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = 4 + trial * 3;
            let e = Tensor::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(-20.0..20.0)).collect());
            let seeds = farthest_point_seeds(&e, trial % n, n.min(8)).unwrap();
            for j in 1..seeds.len() {
                let got = seeds[..j].iter().map(|&s| sq_dist(e.row(seeds[j]), e.row(s))).fold(f64::INFINITY, f64::min);
                assert_eq!(got, brute_next(&e, &seeds[..j]));
            }
        }
    }

    #[test]
    fn duplicates_take_lowest_index() {
        assert_eq!(farthest_point_seeds(&endpoints(&[1.0, 1.0, 1.0]), 1, 3).unwrap(), vec![1, 0, 2]);
    }

    fn run(trajs: &Tensor, pi: &Tensor, k: usize, tau: f64) -> (Tensor, Tensor, f64, Vec<usize>, Tensor) {
        let mut g = Graph::new();
        let n = trajs.rows();
        let tokens = g.input(Tensor::from_vec(n, 3, (0..3 * n).map(|i| i as f64).collect()));
        let tv = g.input(trajs.clone());
        let out = pgqa(&mut g, tokens, tv, pi, k, tau).unwrap();
        (
            g.value(out.assignment).clone(),
            g.value(out.medoids).clone(),
            g.value(out.entropy).item(),
            out.seeds,
            g.value(out.grouped).clone(),
        )
    }

    fn trajs(ends: &[(f64, f64)]) -> Tensor {
        Tensor::from_rows(&ends.iter().map(|&(x, y)| vec![x * 0.5, y * 0.5, x, y]).collect::<Vec<_>>())
    }

    #[test]
    fn assignment_rows_and_medoids() {
        let t = trajs(&[(0.0, 0.0), (1.0, 0.0), (10.0, 0.0), (9.0, 1.0), (-5.0, 2.0)]);
        let pi = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4]]);
        let (a, m, h, seeds, z) = run(&t, &pi, 3, 1.0);
        assert_eq!(seeds[0], 2);
        for r in 0..3 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(m.row(r), t.row(seeds[r]));
        }
        assert!(h > 0.0 && h.is_finite());
        assert_eq!(z.shape(), (3, 3));
    }

    #[test]
    fn small_temperature_gives_nearest_one_hot() {
        let t = trajs(&[(0.0, 0.0), (1.0, 0.0), (10.0, 0.0), (9.0, 1.0)]);
        let pi = Tensor::from_rows(&[vec![1.0], vec![0.1], vec![0.1], vec![0.1]]);
        let (a, _, _, seeds, _) = run(&t, &pi, 4, 1e-6);
        assert_eq!(seeds.len(), 4);
        for (r, &s) in seeds.iter().enumerate() {
            let ends: Vec<Vec<f64>> = (0..4).map(|i| t.row(i)[2..].to_vec()).collect();
            let nearest = (0..4).min_by(|&i, &j| sq_dist(&ends[i], &ends[s]).total_cmp(&sq_dist(&ends[j], &ends[s]))).unwrap();
            assert!((a.get(r, nearest) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_rows_have_log_n_entropy() {
        let t = trajs(&[(3.0, 3.0); 4]);
        let pi = Tensor::from_rows(&vec![vec![1.0]; 4]);
        let (a, _, h, _, _) = run(&t, &pi, 2, 1.0);
        assert!(a.data().iter().all(|&x| (x - 0.25).abs() < 1e-12));
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!((h - 1.3863).abs() < 1e-4);
    }
}
