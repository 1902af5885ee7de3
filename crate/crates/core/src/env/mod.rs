//! Environments behind a common stepping interface.
//!
//! Three local tasks are built in: a torque-limited [`Pendulum`] swing-up, a
//! one-step 2D [`GmmBandit`] whose reward is the log-density of a ten-mode
//! Gaussian ring, and a [`PointMass`] with two equally rewarding goals.
//! [`RemoteEnv`] speaks the newline-delimited JSON protocol to an external host.

mod gmm;
mod pendulum;
mod point_mass;
mod remote;

pub use gmm::{toy_q_gap, GmmBandit, GmmSpec};
pub use pendulum::Pendulum;
pub use point_mass::PointMass;
pub use remote::{RemoteEnv, DEFAULT_PORT};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.max_episode_steps == 0 {
            return Err(Error::invalid("env dims and episode length must be >= 1"));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::invalid("action bounds must have action_dim entries"));
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid("action_low must be < action_high elementwise"));
        }
        Ok(())
    }

    /// Clips `action` into bounds; returns whether any coordinate moved.
    pub fn clip(&self, action: &[f64]) -> Result<(Vec<f64>, bool)> {
        if action.len() != self.action_dim {
            return Err(Error::invalid(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.action_dim
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("action must be finite"));
        }
        let mut clipped = false;
        let out = action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| {
                let c = a.clamp(lo, hi);
                clipped |= c != a;
                c
            })
            .collect();
        Ok((out, clipped))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True end of the episode; the bootstrap term is dropped.
    pub terminal: bool,
    /// Time limit reached; the episode ends but the state is not terminal.
    pub truncated: bool,
    /// The submitted action was outside bounds and was clipped.
    pub clipped: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
}

/// Named environment selector used by configs and the CLI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvKind {
    Pendulum,
    GmmBandit,
    PointMass,
    Remote { host: String, port: u16 },
}

impl EnvKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(EnvKind::Pendulum),
            "gmm-bandit" | "gmm" => Ok(EnvKind::GmmBandit),
            "point-mass" => Ok(EnvKind::PointMass),
            other => {
                let rest = other.strip_prefix("remote:").ok_or_else(|| {
                    Error::invalid(format!(
                        "unknown environment `{other}` (expected pendulum, gmm-bandit, \
                         point-mass or remote:<host>:<port>)"
                    ))
                })?;
                let (host, port) = match rest.rsplit_once(':') {
                    Some((host, port)) => (
                        host,
                        port.parse()
                            .map_err(|_| Error::invalid(format!("bad port in `{other}`")))?,
                    ),
                    None => (rest, remote::DEFAULT_PORT),
                };
                if host.is_empty() {
                    return Err(Error::invalid(format!("remote env `{other}` needs a host")));
                }
                Ok(EnvKind::Remote {
                    host: host.to_string(),
                    port,
                })
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            EnvKind::Pendulum => "pendulum".into(),
            EnvKind::GmmBandit => "gmm-bandit".into(),
            EnvKind::PointMass => "point-mass".into(),
            EnvKind::Remote { host, port } => format!("remote:{host}:{port}"),
        }
    }

    pub fn is_local(&self) -> bool {
        !matches!(self, EnvKind::Remote { .. })
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvKind::Pendulum => Box::new(Pendulum::new()),
            EnvKind::GmmBandit => Box::new(GmmBandit::new()),
            EnvKind::PointMass => Box::new(PointMass::new()),
            EnvKind::Remote { host, port } => Box::new(RemoteEnv::connect(host, *port)?),
        })
    }
}
