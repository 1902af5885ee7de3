//! Run configuration and its flat `key = value` text form.
//!
//! Every key is optional in a config file; missing keys keep their default.
//! Blank lines and `#` comments are ignored. Unknown keys and unparsable
//! values are errors that name the key and list every key with its default.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::value::{CriticConfig, ExpectileConfig};

/// Shape of the weight applied to the centred value gap `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightingKind {
    /// `1(d > 0) exp(d)`, used for control tasks.
    ExpIndicator,
    /// `1(d > 0) d`, used for the Gaussian-mixture toy.
    LinearIndicator,
}

impl WeightingKind {
    pub fn name(self) -> &'static str {
        match self {
            WeightingKind::ExpIndicator => "exp_indicator",
            WeightingKind::LinearIndicator => "linear_indicator",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exp_indicator" => Some(WeightingKind::ExpIndicator),
            "linear_indicator" => Some(WeightingKind::LinearIndicator),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingConfig {
    pub kind: WeightingKind,
    pub mean_normalize: bool,
    /// Upper clamp on each weight; `inf` leaves `f` unbounded.
    pub max_weight: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            kind: WeightingKind::ExpIndicator,
            mean_normalize: true,
            max_weight: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub gamma: f64,
    /// Multiplies rewards before they enter the buffer; evaluation returns are unscaled.
    pub reward_scale: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub expectile_tau: f64,
    pub lambda: f64,
    pub flow_steps: usize,
    pub gradient_steps_per_env_step: usize,
    /// Transitions collected with uniformly random actions before learning starts.
    pub warmup_transitions: usize,
    pub polyak_rate: f64,
    pub seed: u64,
    pub total_env_steps: u64,
    /// Env steps between evaluation/metrics rows; 0 disables periodic rows.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub critic_hidden_dim: usize,
    pub critic_hidden_layers: usize,
    pub critic_activation: Activation,
    pub actor_hidden_dim: usize,
    pub actor_hidden_layers: usize,
    pub actor_activation: Activation,
    pub twin_critics: bool,
    /// Damp the expectile alternation with a Polyak target for `Q^beta*`.
    pub behavior_target_network: bool,
    pub weighting: WeightingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            reward_scale: 1.0,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            expectile_tau: 0.9,
            lambda: 0.1,
            flow_steps: 1,
            gradient_steps_per_env_step: 1,
            warmup_transitions: 5000,
            polyak_rate: 0.005,
            seed: 0,
            total_env_steps: 100_000,
            eval_interval: 5000,
            eval_episodes: 10,
            critic_hidden_dim: 512,
            critic_hidden_layers: 3,
            critic_activation: Activation::Mish,
            actor_hidden_dim: 512,
            actor_hidden_layers: 2,
            actor_activation: Activation::Elu,
            twin_critics: true,
            behavior_target_network: true,
            weighting: WeightingConfig::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "gamma",
    "reward_scale",
    "batch_size",
    "buffer_capacity",
    "actor_lr",
    "critic_lr",
    "expectile_tau",
    "lambda",
    "flow_steps",
    "gradient_steps_per_env_step",
    "warmup_transitions",
    "polyak_rate",
    "seed",
    "total_env_steps",
    "eval_interval",
    "eval_episodes",
    "critic_hidden_dim",
    "critic_hidden_layers",
    "critic_activation",
    "actor_hidden_dim",
    "actor_hidden_layers",
    "actor_activation",
    "twin_critics",
    "behavior_target_network",
    "weighting",
    "mean_normalize",
    "max_weight",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_error(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_error(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_activation(key: &str, value: &str) -> Result<Activation> {
    Activation::parse(value).ok_or_else(|| config_error(key, format!("unknown activation `{value}` (mish, elu)")))
}

fn config_error(key: &str, message: String) -> Error {
    Error::Config {
        key: key.to_string(),
        message: format!("{message}; defaults:\n{}", RunConfig::default().to_text()),
    }
}

impl RunConfig {
    /// Value of `key` in the text form.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "gamma" => self.gamma.to_string(),
            "reward_scale" => self.reward_scale.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "buffer_capacity" => self.buffer_capacity.to_string(),
            "actor_lr" => self.actor_lr.to_string(),
            "critic_lr" => self.critic_lr.to_string(),
            "expectile_tau" => self.expectile_tau.to_string(),
            "lambda" => self.lambda.to_string(),
            "flow_steps" => self.flow_steps.to_string(),
            "gradient_steps_per_env_step" => self.gradient_steps_per_env_step.to_string(),
            "warmup_transitions" => self.warmup_transitions.to_string(),
            "polyak_rate" => self.polyak_rate.to_string(),
            "seed" => self.seed.to_string(),
            "total_env_steps" => self.total_env_steps.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "critic_hidden_dim" => self.critic_hidden_dim.to_string(),
            "critic_hidden_layers" => self.critic_hidden_layers.to_string(),
            "critic_activation" => self.critic_activation.name().to_string(),
            "actor_hidden_dim" => self.actor_hidden_dim.to_string(),
            "actor_hidden_layers" => self.actor_hidden_layers.to_string(),
            "actor_activation" => self.actor_activation.name().to_string(),
            "twin_critics" => self.twin_critics.to_string(),
            "behavior_target_network" => self.behavior_target_network.to_string(),
            "weighting" => self.weighting.kind.name().to_string(),
            "mean_normalize" => self.weighting.mean_normalize.to_string(),
            "max_weight" => self.weighting.max_weight.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form. Does not validate cross-field invariants.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "gamma" => self.gamma = parse_num(key, v)?,
            "reward_scale" => self.reward_scale = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse_num(key, v)?,
            "actor_lr" => self.actor_lr = parse_num(key, v)?,
            "critic_lr" => self.critic_lr = parse_num(key, v)?,
            "expectile_tau" => self.expectile_tau = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "flow_steps" => self.flow_steps = parse_num(key, v)?,
            "gradient_steps_per_env_step" => self.gradient_steps_per_env_step = parse_num(key, v)?,
            "warmup_transitions" => self.warmup_transitions = parse_num(key, v)?,
            "polyak_rate" => self.polyak_rate = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "total_env_steps" => self.total_env_steps = parse_num(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "critic_hidden_dim" => self.critic_hidden_dim = parse_num(key, v)?,
            "critic_hidden_layers" => self.critic_hidden_layers = parse_num(key, v)?,
            "critic_activation" => self.critic_activation = parse_activation(key, v)?,
            "actor_hidden_dim" => self.actor_hidden_dim = parse_num(key, v)?,
            "actor_hidden_layers" => self.actor_hidden_layers = parse_num(key, v)?,
            "actor_activation" => self.actor_activation = parse_activation(key, v)?,
            "twin_critics" => self.twin_critics = parse_bool(key, v)?,
            "behavior_target_network" => self.behavior_target_network = parse_bool(key, v)?,
            "weighting" => {
                self.weighting.kind = WeightingKind::parse(v).ok_or_else(|| {
                    config_error(key, format!("unknown weighting `{v}` (exp_indicator, linear_indicator)"))
                })?
            }
            "mean_normalize" => self.weighting.mean_normalize = parse_bool(key, v)?,
            "max_weight" => self.weighting.max_weight = parse_num(key, v)?,
            _ => return Err(config_error(key, "unknown key".into())),
        }
        Ok(())
    }

    /// Parses config text and validates the result. Every key must appear
    /// exactly once; a missing, repeated or unknown key is an error naming it
    /// and listing the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = vec![false; KEYS.len()];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_error(line, format!("line {} is not `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            cfg.set(key, value)?;
            let idx = KEYS.iter().position(|k| *k == key).expect("set accepted the key");
            if std::mem::replace(&mut seen[idx], true) {
                return Err(config_error(key, "key given twice".into()));
            }
        }
        if let Some(idx) = seen.iter().position(|s| !s) {
            return Err(config_error(KEYS[idx], "missing key".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `parse` of the defaults with `overrides` (`key = value` lines) applied.
    pub fn with_overrides(overrides: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for raw in overrides.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_error(line, "expected `key = value`".into()))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key in a fixed order; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("polyak_rate", self.polyak_rate),
            ("reward_scale", self.reward_scale),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(key, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(config_error("gamma", format!("must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_error("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.weighting.max_weight > 0.0) {
            return Err(config_error(
                "max_weight",
                format!("must be positive, got {}", self.weighting.max_weight),
            ));
        }
        if self.polyak_rate > 1.0 {
            return Err(config_error("polyak_rate", format!("must be <= 1, got {}", self.polyak_rate)));
        }
        if !(self.expectile_tau > 0.0 && self.expectile_tau < 1.0) {
            return Err(config_error(
                "expectile_tau",
                format!("must lie in (0, 1), got {}", self.expectile_tau),
            ));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("flow_steps", self.flow_steps),
            ("gradient_steps_per_env_step", self.gradient_steps_per_env_step),
            ("critic_hidden_dim", self.critic_hidden_dim),
            ("critic_hidden_layers", self.critic_hidden_layers),
            ("actor_hidden_dim", self.actor_hidden_dim),
            ("actor_hidden_layers", self.actor_hidden_layers),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(config_error(key, "must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            hidden_dim: self.critic_hidden_dim,
            hidden_layers: self.critic_hidden_layers,
            activation: self.critic_activation,
            learning_rate: self.critic_lr,
            polyak_rate: self.polyak_rate,
            twin: self.twin_critics,
            behavior_target: self.behavior_target_network,
        }
    }

    pub fn expectile(&self) -> Result<ExpectileConfig> {
        ExpectileConfig::new(self.expectile_tau)
    }
}
