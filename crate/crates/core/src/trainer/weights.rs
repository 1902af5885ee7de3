use crate::error::{ensure_len, Result};

use super::config::{WeightingConfig, WeightingKind};

/// Non-negative weights `f(d_i)` from the gaps `d_i = q_beta_i - q_pi_i`.
///
/// With `mean_normalize` the batch mean of `d` is subtracted first, which is
/// the same as centring each value stream separately. Weights are clamped to
/// `max_weight`.
pub fn compute_weights(q_beta_star: &[f64], q_pi: &[f64], cfg: &WeightingConfig) -> Result<Vec<f64>> {
    ensure_len("q_pi values", q_pi.len(), q_beta_star.len())?;
    let mut d: Vec<f64> = q_beta_star.iter().zip(q_pi).map(|(b, p)| b - p).collect();
    if cfg.mean_normalize && !d.is_empty() {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter_mut().for_each(|x| *x -= mean);
    }
    Ok(d.into_iter().map(|x| weight(x, cfg.kind).min(cfg.max_weight)).collect())
}

/// `1(x > 0) exp(x)` or `1(x > 0) x`.
pub fn weight(x: f64, kind: WeightingKind) -> f64 {
    if x > 0.0 {
        match kind {
            WeightingKind::ExpIndicator => x.exp(),
            WeightingKind::LinearIndicator => x,
        }
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn exp_cfg(mean_normalize: bool) -> WeightingConfig {
        WeightingConfig {
            kind: WeightingKind::ExpIndicator,
            mean_normalize,
            max_weight: f64::INFINITY,
        }
    }

    #[test]
    fn non_positive_gaps_get_zero_weight() {
        let w = compute_weights(&[0.0, -1.0, 2.0], &[0.0, 0.0, 5.0], &exp_cfg(false)).unwrap();
        assert_eq!(w, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn centred_examples() {
        let w = compute_weights(&[1.0, -1.0], &[0.0, 0.0], &exp_cfg(true)).unwrap();
        assert!((w[0] - E).abs() < 1e-15 && w[1] == 0.0);
        let w = compute_weights(&[5.0, 3.0], &[0.0, 0.0], &exp_cfg(true)).unwrap();
        assert!((w[0] - E).abs() < 1e-15 && w[1] == 0.0);
    }

    #[test]
    fn linear_kind() {
        let cfg = WeightingConfig {
            kind: WeightingKind::LinearIndicator,
            mean_normalize: false,
            max_weight: f64::INFINITY,
        };
        assert_eq!(compute_weights(&[2.5, -1.0], &[0.5, 0.0], &cfg).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn clamp_applies_after_the_weighting_function() {
        let cfg = WeightingConfig {
            max_weight: 100.0,
            ..exp_cfg(false)
        };
        let w = compute_weights(&[800.0, 1.0], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(w[0], 100.0);
        assert!((w[1] - E).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(compute_weights(&[1.0], &[1.0, 2.0], &exp_cfg(true)).is_err());
    }
}
