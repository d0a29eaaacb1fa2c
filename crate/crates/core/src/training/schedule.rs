use std::f64::consts::PI;

use super::config::{ScheduleKind, TrainConfig};

/// Cosine annealing inside one cycle: `eta_max` at `t_cur = 0`, `eta_min`
/// at `t_cur = t_i`.
pub fn cosine_annealing_lr(t_cur: f64, t_i: f64, eta_max: f64, eta_min: f64) -> f64 {
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (PI * t_cur / t_i).cos())
}

/// Cosine annealing with warm restarts at fractional epoch `progress`.
/// Cycle `i` lasts `t0 · t_mult^i` epochs. A cycle includes its end point,
/// so exactly `progress = t0` yields `eta_min`; the restart to `eta_max`
/// takes effect immediately after.
pub fn cosine_warm_restart_lr(
    progress: f64,
    t0: f64,
    t_mult: f64,
    eta_max: f64,
    eta_min: f64,
) -> f64 {
    let (t_cur, t_i) = locate_cycle(progress.max(0.0), t0, t_mult);
    cosine_annealing_lr(t_cur, t_i, eta_max, eta_min)
}

/// Position inside the current cycle and that cycle's length.
fn locate_cycle(progress: f64, t0: f64, t_mult: f64) -> (f64, f64) {
    let mut start = 0.0;
    let mut len = t0;
    // Cycle lengths grow geometrically, so this loop is short.
    while progress > start + len {
        start += len;
        len *= t_mult;
    }
    (progress - start, len)
}

/// Learning rate for the step taken at fractional epoch `progress`.
pub fn learning_rate(cfg: &TrainConfig, progress: f64) -> f64 {
    match cfg.schedule {
        ScheduleKind::Constant => cfg.lr,
        ScheduleKind::Cosine => {
            cosine_warm_restart_lr(progress, cfg.t0, cfg.t_mult, cfg.lr, cfg.eta_min)
        }
    }
}
