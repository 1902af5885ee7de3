use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::{EnvSpec, Environment, StepOutcome};
use crate::error::Result;

/// Ten unit-covariance Gaussians on a radius-10 ring plus the analytic value
/// gap used by the 2D reweighting demo.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    pub means: Vec<[f64; 2]>,
    pub q_gap_center: [f64; 2],
    pub q_gap_scale: f64,
    pub q_gap_offset: f64,
    pub toy_flow_steps: usize,
}

impl Default for GmmSpec {
    fn default() -> Self {
        let means = (0..10)
            .map(|k| {
                let ang = 2.0 * PI * k as f64 / 10.0;
                [10.0 * ang.cos(), 10.0 * ang.sin()]
            })
            .collect();
        Self {
            means,
            q_gap_center: [0.0, 8.66],
            q_gap_scale: 1.0 / 600.0,
            q_gap_offset: 3.0,
            toy_flow_steps: 5,
        }
    }
}

impl GmmSpec {
    /// `log( (1/K) sum_k N(a; mu_k, I) )`, via log-sum-exp.
    pub fn log_density(&self, a: [f64; 2]) -> f64 {
        let logs: Vec<f64> = self
            .means
            .iter()
            .map(|m| -0.5 * ((a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2)))
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
        mx + s.ln() - (2.0 * PI).ln() - (self.means.len() as f64).ln()
    }

    pub fn density(&self, a: [f64; 2]) -> f64 {
        self.log_density(a).exp()
    }

    /// Draws `n` points, one row each.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let m = self.means[rng.random_range(0..self.means.len())];
            row[0] = m[0] + rng.sample::<f64, _>(StandardNormal);
            row[1] = m[1] + rng.sample::<f64, _>(StandardNormal);
        }
        out
    }

    /// Largest log-density: grid search over `[-14, 14]^2`, then a shrinking
    /// pattern search from the best grid point.
    pub fn best_log_density(&self) -> f64 {
        let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
        let n = 561;
        let step = 28.0 / (n - 1) as f64;
        for i in 0..n {
            for j in 0..n {
                let a = [-14.0 + i as f64 * step, -14.0 + j as f64 * step];
                let v = self.log_density(a);
                if v > best.1 {
                    best = (a, v);
                }
            }
        }
        let (mut a, mut v) = best;
        let mut h = step;
        while h > 1e-10 {
            let mut moved = false;
            for d in [[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]] {
                let c = [a[0] + d[0], a[1] + d[1]];
                let cv = self.log_density(c);
                if cv > v {
                    a = c;
                    v = cv;
                    moved = true;
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        v
    }
}

/// `q_gap_offset - q_gap_scale * ||a - q_gap_center||^2`, the value advantage
/// of the behavior-optimal policy in the 2D reweighting demo.
pub fn toy_q_gap(spec: &GmmSpec, a: [f64; 2]) -> f64 {
    let dx = a[0] - spec.q_gap_center[0];
    let dy = a[1] - spec.q_gap_center[1];
    spec.q_gap_offset - spec.q_gap_scale * (dx * dx + dy * dy)
}

/// Stateless one-step bandit over the plane; reward is the GMM log-density of
/// the action.
#[derive(Debug, Clone)]
pub struct GmmBandit {
    spec: EnvSpec,
    gmm: GmmSpec,
}

impl Default for GmmBandit {
    fn default() -> Self {
        Self::new()
    }
}

impl GmmBandit {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 1,
                action_dim: 2,
                action_low: vec![-14.0, -14.0],
                action_high: vec![14.0, 14.0],
                max_episode_steps: 1,
            },
            gmm: GmmSpec::default(),
        }
    }

    pub fn gmm(&self) -> &GmmSpec {
        &self.gmm
    }
}

impl Environment for GmmBandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let (a, clipped) = self.spec.clip(action)?;
        Ok(StepOutcome {
            next_state: vec![0.0],
            reward: self.gmm.log_density([a[0], a[1]]),
            terminal: true,
            truncated: false,
            clipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_density(g: &GmmSpec, a: [f64; 2]) -> f64 {
        let mut s = 0.0;
        for m in &g.means {
            let d2 = (a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2);
            s += (-0.5 * d2).exp() / (2.0 * PI);
        }
        s / g.means.len() as f64
    }

    #[test]
    fn log_density_matches_direct_sum() {
        let g = GmmSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let a = [rng.random_range(-14.0..14.0), rng.random_range(-14.0..14.0)];
            let direct = brute_density(&g, a).ln();
            assert!((g.log_density(a) - direct).abs() <= 1e-12, "{a:?}");
        }
    }

    #[test]
    fn reward_at_a_mode() {
        let mut env = GmmBandit::new();
        let mu0 = env.gmm().means[0];
        let out = env.step(&mu0).unwrap();
        assert!(out.terminal);
        let cross: f64 = env.gmm().means[1..]
            .iter()
            .map(|m| (-0.5 * ((mu0[0] - m[0]).powi(2) + (mu0[1] - m[1]).powi(2))).exp())
            .sum();
        let expected = (0.1 * (1.0 + cross) / (2.0 * PI)).ln();
        assert!((out.reward - expected).abs() < 1e-12);
        assert!((out.reward - (1.0 / (20.0 * PI)).ln()).abs() < 1e-6);
    }

    #[test]
    fn best_log_density_sits_at_the_modes() {
        let g = GmmSpec::default();
        let best = g.best_log_density();
        assert!((best - (1.0 / (20.0 * PI)).ln()).abs() < 1e-6);
        assert!(best >= g.log_density(g.means[3]));
    }

    #[test]
    fn q_gap_hand_values() {
        let g = GmmSpec::default();
        assert!((toy_q_gap(&g, [0.0, 8.66]) - 3.0).abs() < 1e-15);
        assert!((toy_q_gap(&g, [0.0, 0.0]) - (3.0 - 8.66 * 8.66 / 600.0)).abs() < 1e-12);
        assert!((toy_q_gap(&g, [0.0, 0.0]) - 2.875).abs() < 1e-5);
        let r = 1800f64.sqrt();
        assert!(toy_q_gap(&g, [r, 8.66]).abs() < 1e-12);
    }

    #[test]
    fn bandit_state_is_constant() {
        let mut env = GmmBandit::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(env.reset(&mut rng).unwrap(), vec![0.0]);
        assert_eq!(env.step(&[1.0, 1.0]).unwrap().next_state, vec![0.0]);
    }
}
