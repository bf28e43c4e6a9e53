use std::f64::consts::PI;

/// Fraction of steps spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;
/// Initial learning rate is `max_lr / START_DIV`.
pub const START_DIV: f64 = 25.0;
/// Final learning rate is `max_lr / FINAL_DIV`.
pub const FINAL_DIV: f64 = 1e4;

/// One-cycle learning rate: linear warmup from `max_lr/25` to `max_lr` over
/// the first 30% of steps, then cosine annealing down to `max_lr/1e4`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    let start = max_lr / START_DIV;
    let floor = max_lr / FINAL_DIV;
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = WARMUP_FRACTION * total;
    if step == 0.0 {
        return start;
    }
    if step <= warm {
        return start + (max_lr - start) * step / warm;
    }
    let p = (step - warm) / (total - warm);
    floor + (max_lr - floor) * 0.5 * (1.0 + (PI * p).cos())
}
