use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warmup to `max_lr`, then cosine decay to zero at `cfg.steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.steps);
    if step < cfg.warmup_steps {
        return cfg.max_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.max_lr * 0.5 * (1.0 + (PI * progress).cos())
}
