use proptest::prelude::*;
use r2p_core::bank::{build_bank, decode_bank, embed_trajectory, encode_bank, futures_matrix, BuildMode};
use r2p_core::config::RunConfig;
use r2p_core::losses::{diversity_loss, endpoint_loss};
use r2p_core::metrics::sample_metrics;
use r2p_core::pgqa::pgqa;
use r2p_core::scene::{generate_dataset, generate_scene, to_agent_frame, to_world_frame, Dims};
use r2p_core::schedule::{learning_rate, temperature};
use r2p_core::tape::{argmax, huber, softmax_rows_masked, Graph};
use r2p_core::Tensor;

const SMALL: Dims = Dims { t_hist: 6, t_fut: 8, n_agents: 3, n_lanes: 2, lane_nodes: 4, n_lights: 1 };

fn tensor(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v))
}

fn sized(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| tensor(r, c, scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_sum_to_one(x in sized(6, 12, 20.0), seed in any::<u64>()) {
        let mask: Vec<bool> = (0..x.cols()).map(|c| c == (seed as usize) % x.cols() || (seed >> (c % 64)) & 1 == 1).collect();
        let p = softmax_rows_masked(&x, Some(&mask));
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (c, &m) in mask.iter().enumerate() {
                if !m {
                    prop_assert_eq!(p.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn straight_through_rows_are_one_hot_at_argmax(z in sized(5, 20, 4.0), tau in 0.05f64..5.0) {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let (y, pi, idx) = g.straight_through_select(zv, tau, None, false);
        let y = g.value(y);
        for r in 0..z.rows() {
            prop_assert_eq!(idx[r], argmax(z.row(r)));
            prop_assert_eq!(y.row(r).iter().sum::<f64>(), 1.0);
            prop_assert_eq!(y.get(r, idx[r]), 1.0);
            prop_assert!((pi.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unique_selection_never_repeats(z in (1usize..6).prop_flat_map(|n| tensor(n, n + 4, 3.0)), tau in 0.1f64..3.0) {
        let mut g = Graph::new();
        let zv = g.input(z);
        let (_, _, idx) = g.straight_through_select(zv, tau, None, true);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), idx.len());
    }

    #[test]
    fn grouping_rows_are_distributions(n in 2usize..20, seed in any::<u64>(), tau_g in 1e-3f64..50.0) {
        let trajs = Tensor::from_vec(n, 4, (0..4 * n).map(|i| ((seed.wrapping_mul(i as u64 + 7) % 1000) as f64) / 25.0).collect());
        let pi = Tensor::from_vec(n, 2, (0..2 * n).map(|i| ((seed ^ i as u64) % 97) as f64 / 97.0).collect());
        let k = 1 + (seed as usize) % n;
        let mut g = Graph::new();
        let tokens = g.input(Tensor::zeros(n, 3));
        let tv = g.input(trajs);
        let out = pgqa(&mut g, tokens, tv, &pi, k, tau_g).unwrap();
        let a = g.value(out.assignment);
        for r in 0..k {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let h = g.value(out.entropy).item();
        prop_assert!(h >= -1e-12 && h <= (n as f64).ln() + 1e-9);
    }

    #[test]
    fn endpoint_loss_lies_between_hard_min_and_max(anchors in sized(6, 2, 30.0).prop_filter("two columns", |t| t.cols() == 2), gx in -30.0f64..30.0, gy in -30.0f64..30.0, tau_e in 0.01f64..10.0) {
        let n = anchors.rows();
        let h: Vec<f64> = (0..n).map(|r| huber((anchors.get(r, 0) - gx).hypot(anchors.get(r, 1) - gy), 1.0)).collect();
        let mut g = Graph::new();
        let a = g.input(anchors);
        let o = g.input(Tensor::zeros(n, 2));
        let l = endpoint_loss(&mut g, a, o, [gx, gy], tau_e, 1.0);
        let v = g.value(l).item();
        let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = h.iter().copied().fold(0.0, f64::max);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }

    #[test]
    fn diversity_loss_is_scale_invariant(q in sized(6, 8, 2.0), s in 0.1f64..10.0) {
        prop_assume!((0..q.rows()).all(|r| q.row(r).iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let mut g = Graph::new();
        let a = g.input(q.clone());
        let b = g.input(q.map(|x| x * s));
        let (la, _) = diversity_loss(&mut g, a, 0.1);
        let (lb, _) = diversity_loss(&mut g, b, 0.1);
        prop_assert!(g.value(la).item() >= 0.0);
        prop_assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-9);
    }

    #[test]
    fn schedules_stay_in_range(total in 1usize..5000, frac in 0.0f64..1.0) {
        let step = (frac * total as f64) as usize;
        let t = temperature(step, total, 5.0, 0.25);
        prop_assert!((0.25..=5.0).contains(&t));
        prop_assert!(temperature(step + 1, total, 5.0, 0.25) <= t);
        let lr = learning_rate(step, total, 1.4e-3, 20.0, 50.0, 0.25);
        prop_assert!(lr >= 1.4e-3 / 50.0 - 1e-18 && lr <= 1.4e-3 + 1e-18);
    }

    #[test]
    fn more_modes_never_worsen_min_errors(pred in tensor(6 * 5, 2, 20.0), gt in tensor(5, 2, 20.0), raw in prop::collection::vec(0.01f64..1.0, 6)) {
        let total: f64 = raw.iter().sum();
        let conf: Vec<f64> = raw.iter().map(|c| c / total).collect();
        let m = sample_metrics(&pred, &conf, &gt).unwrap();
        prop_assert!(m.min_ade6 <= m.min_ade1 + 1e-12);
        prop_assert!(m.min_fde6 <= m.min_fde1 + 1e-12);
        prop_assert!(m.brier_min_fde >= m.min_fde6 - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn embeddings_have_unit_norm(traj in tensor(8, 2, 40.0), seed in any::<u64>(), d in 1usize..48) {
        let e = embed_trajectory(&traj, seed, d);
        prop_assert_eq!(e.len(), d);
        prop_assert!((e.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frame_round_trip(seed in any::<u64>()) {
        let cfg = RunConfig::default();
        let s = generate_scene(seed, &cfg.data.mix, SMALL).unwrap();
        let back = to_agent_frame(&to_world_frame(&s).unwrap()).unwrap();
        prop_assert!(s.target_future.zip_map(&back.target_future, |a, b| (a - b).abs()).max_abs() < 1e-9);
        prop_assert!(s.target_history.zip_map(&back.target_history, |a, b| (a - b).abs()).max_abs() < 1e-9);
    }

    #[test]
    fn bank_bytes_round_trip(seed in any::<u64>(), clustered in any::<bool>()) {
        let cfg = RunConfig::default();
        let scenes = generate_dataset(seed, 24, &cfg.data.mix, SMALL).unwrap();
        let mode = if clustered { BuildMode::Clustered } else { BuildMode::Random };
        let bank = build_bank(&futures_matrix(&scenes), SMALL.t_fut, 3, 4, mode, seed, 8).unwrap();
        let bytes = encode_bank(&bank);
        prop_assert_eq!(decode_bank(&bytes).unwrap(), bank);
    }
}

#[test]
fn different_banks_have_different_checksums() {
    let cfg = RunConfig::default();
    let scenes = generate_dataset(2, 40, &cfg.data.mix, SMALL).unwrap();
    let f = futures_matrix(&scenes);
    let a = build_bank(&f, SMALL.t_fut, 2, 4, BuildMode::Clustered, 1, 8).unwrap();
    let b = build_bank(&f, SMALL.t_fut, 2, 4, BuildMode::Random, 1, 8).unwrap();
    let c = build_bank(&f, SMALL.t_fut, 2, 4, BuildMode::Clustered, 1, 8).unwrap();
    assert_ne!(a.checksum(), b.checksum());
    assert_eq!(a.checksum(), c.checksum());
}
