//! Displacement metrics over K predicted modes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Final-step displacement above which a prediction counts as a miss, m.
pub const MISS_THRESHOLD: f64 = 2.0;
pub const TOP_K: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub min_ade1: f64,
    pub min_ade6: f64,
    pub min_fde1: f64,
    pub min_fde6: f64,
    pub miss_rate: f64,
    pub brier_min_fde: f64,
}

fn displacements(pred: &Tensor, gt: &Tensor, mode: usize) -> (f64, f64) {
    let t = gt.rows();
    let d: Vec<f64> = (0..t).map(|s| (pred.get(mode * t + s, 0) - gt.get(s, 0)).hypot(pred.get(mode * t + s, 1) - gt.get(s, 1))).collect();
    (d.iter().sum::<f64>() / t as f64, d[t - 1])
}

/// Mode indices by descending confidence, lowest index on ties.
pub fn ranked_modes(conf: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..conf.len()).collect();
    idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    idx
}

/// `pred` is `[K·T_f × 2]`, `gt` `[T_f × ≥2]`, `conf` sums to one. With
/// fewer than six modes the six-mode metrics use all of them.
pub fn sample_metrics(pred: &Tensor, conf: &[f64], gt: &Tensor) -> Result<SampleMetrics> {
    let k = conf.len();
    if k == 0 {
        return Err(Error::invalid("no modes"));
    }
    if pred.rows() != k * gt.rows() {
        return Err(Error::invalid("prediction rows do not match modes times horizon"));
    }
    let ranked = ranked_modes(conf);
    let d: Vec<(f64, f64)> = (0..k).map(|m| displacements(pred, gt, m)).collect();
    let top = &ranked[..TOP_K.min(k)];
    let best_fde = *top.iter().min_by(|&&a, &&b| d[a].1.total_cmp(&d[b].1).then(a.cmp(&b))).expect("six modes");
    let min_ade6 = top.iter().map(|&m| d[m].0).fold(f64::INFINITY, f64::min);
    let min_fde6 = d[best_fde].1;
    Ok(SampleMetrics {
        min_ade1: d[ranked[0]].0,
        min_ade6,
        min_fde1: d[ranked[0]].1,
        min_fde6,
        miss_rate: f64::from(u8::from(min_fde6 > MISS_THRESHOLD)),
        brier_min_fde: min_fde6 + (1.0 - conf[best_fde]).powi(2),
    })
}

/// Mean of per-sample metrics in input order.
pub fn mean_metrics(samples: &[SampleMetrics]) -> SampleMetrics {
    let n = samples.len().max(1) as f64;
    let mut m = SampleMetrics::default();
    for s in samples {
        m.min_ade1 += s.min_ade1;
        m.min_ade6 += s.min_ade6;
        m.min_fde1 += s.min_fde1;
        m.min_fde6 += s.min_fde6;
        m.miss_rate += s.miss_rate;
        m.brier_min_fde += s.brier_min_fde;
    }
    m.min_ade1 /= n;
    m.min_ade6 /= n;
    m.min_fde1 /= n;
    m.min_fde6 /= n;
    m.miss_rate /= n;
    m.brier_min_fde /= n;
    m
}
