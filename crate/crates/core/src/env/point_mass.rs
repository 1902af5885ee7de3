use rand::RngCore;

use super::{EnvSpec, Environment, StepOutcome};
use crate::error::Result;

const DT: f64 = 0.1;
const GOAL_X: f64 = 5.0;
const GOAL_WIDTH: f64 = 2.0;

/// 2D double integrator starting at rest at the origin. Two Gaussian reward
/// bumps of equal height sit at `(+5, 0)` and `(-5, 0)`, so the reward field is
/// mirror-symmetric and the optimal behavior is bimodal.
///
/// State `(x, y, vx, vy)`, action is acceleration in `[-1, 1]^2`, 100-step episodes.
#[derive(Debug, Clone)]
pub struct PointMass {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl PointMass {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                max_episode_steps: 100,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            steps: 0,
        }
    }

    pub fn goals() -> [[f64; 2]; 2] {
        [[GOAL_X, 0.0], [-GOAL_X, 0.0]]
    }

    /// Reward for standing at `pos`.
    pub fn reward_at(pos: [f64; 2]) -> f64 {
        Self::goals()
            .iter()
            .map(|g| {
                let d2 = (pos[0] - g[0]).powi(2) + (pos[1] - g[1]).powi(2);
                (-d2 / (2.0 * GOAL_WIDTH * GOAL_WIDTH)).exp()
            })
            .sum()
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.pos = [0.0; 2];
        self.vel = [0.0; 2];
        self.steps = 0;
        Ok(self.observation())
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let (a, clipped) = self.spec.clip(action)?;
        for j in 0..2 {
            self.vel[j] += DT * a[j];
            self.pos[j] += DT * self.vel[j];
        }
        self.steps += 1;
        Ok(StepOutcome {
            next_state: self.observation(),
            reward: Self::reward_at(self.pos),
            terminal: false,
            truncated: self.steps >= self.spec.max_episode_steps,
            clipped,
        })
    }
}
