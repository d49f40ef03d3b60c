//! Learning-rate and loss-weight schedules.

use crate::error::{invalid, Result};

/// Multiplier on the distance loss: 0 before `delay`, a linear ramp over
/// `warmup` epochs, then 1.
pub fn loss_weight_schedule(epoch: i64, delay: i64, warmup: i64) -> Result<f64> {
    if epoch < 0 || delay < 0 || warmup < 0 {
        return Err(invalid(format!(
            "schedule arguments must be non-negative (epoch {epoch}, delay {delay}, warmup {warmup})"
        )));
    }
    if epoch < delay {
        return Ok(0.0);
    }
    if warmup == 0 {
        return Ok(1.0);
    }
    Ok((((epoch - delay) as f64) / warmup as f64).min(1.0))
}

/// Half-cosine from `base` at `t = 0` to `min` at `t = period`.
pub fn cosine_in_cycle(t: f64, period: f64, base_lr: f64, min_lr: f64) -> f64 {
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t / period).cos())
}

/// Cosine annealing with warm restarts. Cycle `i` lasts `period * t_mult^i`
/// steps and starts again at `base_lr`.
pub fn cosine_wr_lr(step: usize, base_lr: f64, min_lr: f64, period: usize, t_mult: f64) -> Result<f64> {
    if period == 0 {
        return Err(invalid("cosine period must be positive"));
    }
    if !(t_mult >= 1.0) {
        return Err(invalid(format!("t_mult must be >= 1, got {t_mult}")));
    }
    let mut t = step as f64;
    let mut len = period as f64;
    while t >= len {
        t -= len;
        len *= t_mult;
    }
    Ok(cosine_in_cycle(t, len, base_lr, min_lr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_schedule() {
        assert_eq!(loss_weight_schedule(5, 20, 10).unwrap(), 0.0);
        assert_eq!(loss_weight_schedule(30, 20, 10).unwrap(), 1.0);
        assert_eq!(loss_weight_schedule(25, 20, 10).unwrap(), 0.5);
        assert_eq!(loss_weight_schedule(40, 20, 10).unwrap(), 1.0);
        assert_eq!(loss_weight_schedule(3, 3, 0).unwrap(), 1.0);
        assert_eq!(loss_weight_schedule(0, 0, 11).unwrap(), 0.0);
        assert!(loss_weight_schedule(1, -1, 2).is_err());
    }

    #[test]
    fn cosine_points() {
        let (b, m) = (1e-3, 1e-5);
        assert_eq!(cosine_wr_lr(0, b, m, 100, 2.0).unwrap(), b);
        assert!((cosine_in_cycle(100.0, 100.0, b, m) - m).abs() < 1e-18);
        assert!((cosine_wr_lr(50, b, m, 100, 2.0).unwrap() - (b + m) / 2.0).abs() < 1e-15);
        // restart at the end of the first cycle, then a cycle twice as long
        assert_eq!(cosine_wr_lr(100, b, m, 100, 2.0).unwrap(), b);
        assert!((cosine_wr_lr(200, b, m, 100, 2.0).unwrap() - (b + m) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_wr_lr(300, b, m, 100, 2.0).unwrap(), b);
        assert!(cosine_wr_lr(1, b, m, 0, 2.0).is_err());
        assert!(cosine_wr_lr(1, b, m, 10, 0.5).is_err());
    }

    #[test]
    fn cosine_monotone_within_cycle() {
        let lrs: Vec<f64> = (0..100).map(|s| cosine_wr_lr(s, 1.0, 0.0, 100, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }
}
