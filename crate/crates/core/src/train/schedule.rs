use std::f64::consts::PI;

/// Cosine annealing with warm restarts: cycle `i` lasts `T0·Tmult^i` epochs
/// and within it `lr = lr_min + ½(lr_max − lr_min)(1 + cos(π·T_cur/T_i))`.
pub fn cosine_warm_restarts(
    epoch: usize,
    t0: usize,
    t_mult: usize,
    lr_max: f64,
    lr_min: f64,
) -> f64 {
    let (t0, t_mult) = (t0.max(1), t_mult.max(1));
    let (mut t_cur, mut t_i) = (epoch, t0);
    while t_cur >= t_i {
        t_cur -= t_i;
        t_i = t_i.saturating_mul(t_mult);
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t_cur as f64 / t_i as f64).cos())
}

/// Linear interpolation from `start` at epoch 0 to `end` at the last epoch.
pub fn alpha_schedule(epoch: usize, total_epochs: usize, start: f64, end: f64) -> f64 {
    if total_epochs <= 1 {
        return start;
    }
    let frac = (epoch.min(total_epochs - 1)) as f64 / (total_epochs - 1) as f64;
    start + (end - start) * frac
}
