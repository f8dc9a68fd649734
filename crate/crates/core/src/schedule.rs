//! Temperature and learning-rate schedules, indexed by optimizer step.

use std::f64::consts::PI;

/// Cosine anneal from `tau0` at step 0 to `tau_f` at `total`.
pub fn temperature(step: usize, total: usize, tau0: f64, tau_f: f64) -> f64 {
    if total == 0 {
        return tau_f;
    }
    let p = step.min(total) as f64 / total as f64;
    tau_f + 0.5 * (tau0 - tau_f) * (1.0 + (PI * p).cos())
}

/// Linear ramp from `peak / div_init` to `peak` over the first `warmup_frac`
/// of training, then cosine decay to `peak / div_final`.
pub fn learning_rate(step: usize, total: usize, peak: f64, div_init: f64, div_final: f64, warmup_frac: f64) -> f64 {
    let lo = peak / div_init;
    let hi = peak / div_final;
    if total == 0 {
        return hi;
    }
    let s = step.min(total) as f64;
    let w = warmup_frac * total as f64;
    if s < w {
        return lo + (peak - lo) * s / w;
    }
    let rest = total as f64 - w;
    let p = if rest > 0.0 { (s - w) / rest } else { 1.0 };
    hi + 0.5 * (peak - hi) * (1.0 + (PI * p).cos())
}
