use std::f64::consts::PI;

use rand::{Rng, RngCore};

use super::{EnvSpec, Environment, StepOutcome};
use crate::error::Result;

const GRAVITY: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;
const MAX_TORQUE: f64 = 2.0;
const MAX_SPEED: f64 = 8.0;

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited pendulum swing-up; `theta = 0` is upright.
///
/// `theta'' = 3g/(2l) sin(theta) + 3/(m l^2) u`, integrated with semi-implicit
/// Euler at `dt = 0.05`, angular speed clamped to 8 rad/s. Observation is `(cos theta, sin theta, omega)`, reward
/// `-(wrap(theta)^2 + 0.1 omega^2 + 0.001 u^2)` on the pre-step state, 200-step
/// episodes, no terminal states.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    omega: f64,
    steps: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Pendulum {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-MAX_TORQUE],
                action_high: vec![MAX_TORQUE],
                max_episode_steps: 200,
            },
            theta: 0.0,
            omega: 0.0,
            steps: 0,
        }
    }

    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.theta = theta;
        self.omega = omega;
        self.steps = 0;
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn angular_velocity(&self) -> f64 {
        self.omega
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }

    fn stiffness() -> f64 {
        3.0 * GRAVITY / (2.0 * LENGTH)
    }

    /// Kinetic plus potential energy per unit inertia, `omega^2/2 + k cos(theta)`.
    pub fn mechanical_energy(&self) -> f64 {
        0.5 * self.omega * self.omega + Self::stiffness() * self.theta.cos()
    }

    /// The energy conserved to second order by the semi-implicit Euler scheme
    /// with zero torque: mechanical energy plus `dt/2 * omega * k sin(theta)`.
    pub fn shadow_energy(&self) -> f64 {
        self.mechanical_energy() + 0.5 * DT * self.omega * Self::stiffness() * self.theta.sin()
    }

    /// Span of the potential energy, `2k`.
    pub fn energy_scale() -> f64 {
        2.0 * Self::stiffness()
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.theta = rng.random_range(-PI..PI);
        self.omega = rng.random_range(-1.0..1.0);
        self.steps = 0;
        Ok(self.observation())
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let (a, clipped) = self.spec.clip(action)?;
        let u = a[0];
        let th = wrap_angle(self.theta);
        let reward = -(th * th + 0.1 * self.omega * self.omega + 0.001 * u * u);
        let accel = Self::stiffness() * self.theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
        self.omega = (self.omega + accel * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.omega * DT;
        self.steps += 1;
        Ok(StepOutcome {
            next_state: self.observation(),
            reward,
            terminal: false,
            truncated: self.steps >= self.spec.max_episode_steps,
            clipped,
        })
    }
}
