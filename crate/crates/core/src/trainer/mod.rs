//! The training loop.
//!
//! Each environment step acts with the flow policy (uniform random actions
//! during warm-up), stores the transition, and then runs
//! `gradient_steps_per_env_step` gradient steps. A gradient step updates, in
//! order: the policy critics by TD regression, the behavior-optimal critics by
//! expectile regression, the target critics by Polyak averaging, and finally the
//! actor on `-mean Q(s, a') + lambda * weighted CFM`.

mod checkpoint;
mod config;
mod metrics;
mod weights;

pub use checkpoint::CHECKPOINT_MAGIC;
pub use config::{RunConfig, WeightingConfig, WeightingKind};
pub use metrics::{CsvMetrics, MetricsRow, MetricsSink, StepStats, METRICS_HEADER};
pub use weights::{compute_weights, weight};

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::flow::{gaussian_noise, rollout, sample_action, weighted_cfm_loss, CfmDraw, FlowConfig, MlpField};
use crate::nn::{adam_step, AdamConfig};
use crate::replay::{Batch, ReplayBuffer, Transition};
use crate::value::{polyak_update, state_action, update_behavior_critics, update_q_pi, CriticSet};

use metrics::Accumulator;

/// The two halves of the actor objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorTerms {
    /// `mean_i min_k Q_k(s_i, a'_i)`; the loss uses its negation.
    pub q_term: f64,
    /// Weighted flow-matching loss, before the lambda factor.
    pub constraint_term: f64,
    pub mean_weight: f64,
    pub frac_positive_weight: f64,
}

/// Accumulates the gradient of `-mean min_k Q_k(s, a') + lambda * L_w` into
/// the actor parameters without stepping the optimizer.
///
/// `a'` is sampled once and shared by the exploitation term and the weights.
pub fn accumulate_actor_gradients<R: Rng + ?Sized>(
    actor: &mut MlpField,
    critics: &CriticSet,
    batch: &Batch,
    lambda: f64,
    weighting: &WeightingConfig,
    flow: &FlowConfig,
    rng: &mut R,
) -> Result<ActorTerms> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let sd = critics.state_dim();
    let noise = gaussian_noise(rng, n, critics.action_dim());
    let ro = rollout(actor, batch.states.view(), noise.view(), flow)?;
    let x = state_action(batch.states.view(), ro.actions().view());

    let mut outputs = Vec::with_capacity(critics.q_pi.len());
    for net in &critics.q_pi {
        outputs.push(net.forward_batch(x.view())?);
    }
    // row-wise min and which critic attains it
    let mut q_min = vec![f64::INFINITY; n];
    let mut arg = vec![0usize; n];
    for (k, (q, _)) in outputs.iter().enumerate() {
        for i in 0..n {
            if q[[i, 0]] < q_min[i] {
                q_min[i] = q[[i, 0]];
                arg[i] = k;
            }
        }
    }
    let q_term = q_min.iter().sum::<f64>() / n as f64;
    if !q_term.is_finite() {
        return Err(Error::numerical(format!("actor Q term (value {q_term})"), 0));
    }

    let mut action_cot = Array2::<f64>::zeros((n, critics.action_dim()));
    for (k, (net, (_, tape))) in critics.q_pi.iter().zip(&outputs).enumerate() {
        let cot = Array2::from_shape_fn((n, 1), |(i, _)| if arg[i] == k { -1.0 / n as f64 } else { 0.0 });
        let g = net.input_gradient(tape, cot.view())?;
        action_cot += &g.slice(s![.., sd..]);
    }
    ro.backward(actor, action_cot.view())?;

    let q_beta = critics.q_beta(batch.states.view(), batch.actions.view())?;
    let w = compute_weights(q_beta.as_slice().expect("contiguous"), &q_min, weighting)?;
    if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("flow-matching weight (value {bad})"), 0));
    }
    let w = ndarray::Array1::from(w);
    let draw = CfmDraw::sample(rng, n, critics.action_dim());
    let constraint_term = weighted_cfm_loss(
        actor,
        batch.states.view(),
        batch.actions.view(),
        w.view(),
        &draw,
        lambda,
    )?;
    Ok(ActorTerms {
        q_term,
        constraint_term,
        mean_weight: w.mean().unwrap_or(0.0),
        frac_positive_weight: w.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64,
    })
}

/// One actor step: gradients of the Lagrangian objective, then Adam.
#[allow(clippy::too_many_arguments)]
pub fn actor_update<R: Rng + ?Sized>(
    actor: &mut MlpField,
    critics: &CriticSet,
    batch: &Batch,
    lambda: f64,
    weighting: &WeightingConfig,
    flow: &FlowConfig,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<ActorTerms> {
    let terms = accumulate_actor_gradients(actor, critics, batch, lambda, weighting, flow, rng)?;
    adam_step(actor.net_mut().params_mut(), adam);
    Ok(terms)
}

fn policy_action<R: Rng + ?Sized>(actor: &MlpField, flow: &FlowConfig, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let noise = gaussian_noise(rng, 1, flow.action_dim());
    Ok(sample_action(actor, state, noise.as_slice().expect("contiguous"), flow)?.action)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub env_steps: u64,
    pub gradient_steps: u64,
    pub episodes: u64,
    /// `(env_step, mean evaluation return)` for every metrics row.
    pub evaluations: Vec<(u64, f64)>,
    pub final_eval_return: Option<f64>,
}

/// Learner state: networks, buffer, rng and counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: RunConfig,
    env_label: String,
    spec: EnvSpec,
    flow: FlowConfig,
    actor: MlpField,
    critics: CriticSet,
    actor_adam: AdamConfig,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    env_steps: u64,
    gradient_steps: u64,
    episodes: u64,
    // mid-episode state and return; not part of checkpoints
    current: Option<(Vec<f64>, f64)>,
    accum: Accumulator,
}

impl Trainer {
    pub fn new(cfg: RunConfig, spec: EnvSpec, env_label: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let flow = FlowConfig::new(cfg.flow_steps, spec.action_low.clone(), spec.action_high.clone())?;
        let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actor = MlpField::new(
            spec.state_dim,
            spec.action_dim,
            cfg.actor_hidden_dim,
            cfg.actor_hidden_layers,
            cfg.actor_activation,
            seeder.random(),
        )?;
        let critics = CriticSet::new(spec.state_dim, spec.action_dim, &cfg.critic_config(), seeder.random())?;
        let rng = ChaCha8Rng::seed_from_u64(seeder.random());
        Ok(Self {
            actor_adam: AdamConfig::new(cfg.actor_lr)?,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, spec.state_dim, spec.action_dim)?,
            cfg,
            env_label: env_label.into(),
            spec,
            flow,
            actor,
            critics,
            rng,
            env_steps: 0,
            gradient_steps: 0,
            episodes: 0,
            current: None,
            accum: Accumulator::default(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn env_label(&self) -> &str {
        &self.env_label
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn flow_config(&self) -> &FlowConfig {
        &self.flow
    }

    pub fn actor(&self) -> &MlpField {
        &self.actor
    }

    pub fn critics(&self) -> &CriticSet {
        &self.critics
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn gradient_steps(&self) -> u64 {
        self.gradient_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// Changes the step budget, e.g. to continue a resumed run.
    pub fn set_total_env_steps(&mut self, total: u64) {
        self.cfg.total_env_steps = total;
    }

    fn check_env(&self, env: &dyn Environment) -> Result<()> {
        let got = env.spec();
        if got.state_dim != self.spec.state_dim
            || got.action_dim != self.spec.action_dim
            || got.action_low != self.spec.action_low
            || got.action_high != self.spec.action_high
        {
            return Err(Error::Precondition(format!(
                "environment spec {got:?} does not match the learner's {:?}",
                self.spec
            )));
        }
        Ok(())
    }

    /// Policy action for one state with fresh noise from `rng`.
    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        policy_action(&self.actor, &self.flow, state, rng)
    }

    /// Mean undiscounted return of `episodes` policy rollouts; deterministic in `seed`.
    pub fn evaluate(&self, env: &mut dyn Environment, episodes: usize, seed: u64) -> Result<f64> {
        self.check_env(env)?;
        if episodes == 0 {
            return Err(Error::invalid("evaluation needs at least one episode"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..episodes {
            let mut state = env.reset(&mut rng)?;
            for _ in 0..env.spec().max_episode_steps {
                let a = self.act(&state, &mut rng)?;
                let out = env.step(&a)?;
                total += out.reward;
                if out.done() {
                    break;
                }
                state = out.next_state;
            }
        }
        Ok(total / episodes as f64)
    }

    /// One batch of critic and actor updates.
    pub fn gradient_step(&mut self) -> Result<StepStats> {
        let step = self.gradient_steps as usize;
        let tag = |e: Error| match e {
            Error::Numerical { context, .. } => Error::Numerical { context, step },
            other => other,
        };
        let batch = self.buffer.sample_batch(self.cfg.batch_size, &mut self.rng)?;
        let td_loss = update_q_pi(&mut self.critics, &self.actor, &batch, self.cfg.gamma, &self.flow, &mut self.rng)
            .map_err(tag)?;
        let (v_loss, q_beta_loss) =
            update_behavior_critics(&mut self.critics, &batch, self.cfg.gamma, &self.cfg.expectile()?).map_err(tag)?;
        polyak_update(&mut self.critics);
        let terms = actor_update(
            &mut self.actor,
            &self.critics,
            &batch,
            self.cfg.lambda,
            &self.cfg.weighting,
            &self.flow,
            &self.actor_adam,
            &mut self.rng,
        )
        .map_err(tag)?;
        self.gradient_steps += 1;
        Ok(StepStats {
            td_loss,
            v_loss,
            q_beta_loss,
            actor_q_term: terms.q_term,
            constraint_term: terms.constraint_term,
            mean_weight: terms.mean_weight,
            frac_positive_weight: terms.frac_positive_weight,
        })
    }

    /// One environment step followed by the configured number of gradient steps.
    pub fn env_step(&mut self, env: &mut dyn Environment) -> Result<()> {
        let (state, ret) = match self.current.take() {
            Some(c) => c,
            None => (env.reset(&mut self.rng)?, 0.0),
        };
        let action: Vec<f64> = if self.buffer.len() < self.cfg.warmup_transitions {
            self.spec
                .action_low
                .iter()
                .zip(&self.spec.action_high)
                .map(|(&lo, &hi)| self.rng.random_range(lo..hi))
                .collect()
        } else {
            policy_action(&self.actor, &self.flow, &state, &mut self.rng)?
        };
        let out = env.step(&action)?;
        let (executed, _) = self.spec.clip(&action)?;
        self.buffer.push(Transition {
            state,
            action: executed,
            reward: out.reward * self.cfg.reward_scale,
            next_state: out.next_state.clone(),
            terminal: out.terminal,
        })?;
        self.env_steps += 1;
        if out.done() {
            self.episodes += 1;
        } else {
            self.current = Some((out.next_state, ret + out.reward));
        }
        if self.buffer.len() >= self.cfg.warmup_transitions.max(1) {
            for _ in 0..self.cfg.gradient_steps_per_env_step {
                let stats = self.gradient_step()?;
                self.accum.add(&stats);
            }
        }
        Ok(())
    }

    fn eval_seed(&self) -> u64 {
        self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.env_steps
    }

    fn emit_row(&mut self, eval_env: &mut dyn Environment, sink: &mut dyn MetricsSink, report: &mut RunReport) -> Result<()> {
        let ret = self.evaluate(eval_env, self.cfg.eval_episodes.max(1), self.eval_seed())?;
        let row = self.accum.take_row(self.env_steps, Some(ret));
        sink.record(&row)?;
        report.evaluations.push((self.env_steps, ret));
        report.final_eval_return = Some(ret);
        Ok(())
    }

    /// Runs until `total_env_steps` environment steps have been taken,
    /// evaluating on `eval_env` every `eval_interval` steps and once at the end.
    ///
    /// On error the trainer is left consistent and can be checkpointed.
    pub fn run(
        &mut self,
        env: &mut dyn Environment,
        eval_env: &mut dyn Environment,
        sink: &mut dyn MetricsSink,
    ) -> Result<RunReport> {
        self.check_env(env)?;
        self.check_env(eval_env)?;
        let mut report = RunReport {
            env_steps: self.env_steps,
            gradient_steps: self.gradient_steps,
            episodes: self.episodes,
            evaluations: Vec::new(),
            final_eval_return: None,
        };
        let mut last_row = None;
        while self.env_steps < self.cfg.total_env_steps {
            self.env_step(env)?;
            if self.cfg.eval_interval > 0 && self.env_steps % self.cfg.eval_interval == 0 {
                self.emit_row(eval_env, sink, &mut report)?;
                last_row = Some(self.env_steps);
            }
        }
        if self.env_steps > 0 && last_row != Some(self.env_steps) {
            self.emit_row(eval_env, sink, &mut report)?;
        }
        report.env_steps = self.env_steps;
        report.gradient_steps = self.gradient_steps;
        report.episodes = self.episodes;
        Ok(report)
    }

    /// Empirical mean and covariance trace of `n` policy actions at `state`.
    pub fn action_spread(&self, state: &[f64], n: usize, seed: u64) -> Result<(Vec<f64>, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = Array2::from_shape_fn((n, state.len()), |(_, j)| state[j]);
        let noise = gaussian_noise(&mut rng, n, self.spec.action_dim);
        let acts = rollout(&self.actor, states.view(), noise.view(), &self.flow)?.into_actions();
        let mean = acts.mean_axis(Axis(0)).expect("n >= 1");
        let trace = acts.var_axis(Axis(0), 1.0).sum();
        Ok((mean.to_vec(), trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GmmBandit;
    use crate::nn::Activation;
    use crate::value::CriticConfig;

    fn small_cfg() -> RunConfig {
        RunConfig {
            batch_size: 16,
            warmup_transitions: 20,
            total_env_steps: 60,
            eval_interval: 25,
            eval_episodes: 3,
            critic_hidden_dim: 8,
            critic_hidden_layers: 1,
            actor_hidden_dim: 8,
            actor_hidden_layers: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_is_an_empty_run() {
        let mut env = GmmBandit::new();
        let mut eval_env = GmmBandit::new();
        let cfg = RunConfig {
            total_env_steps: 0,
            ..small_cfg()
        };
        let mut t = Trainer::new(cfg, env.spec().clone(), "gmm-bandit").unwrap();
        let mut rows: Vec<MetricsRow> = Vec::new();
        let r = t.run(&mut env, &mut eval_env, &mut rows).unwrap();
        assert_eq!((r.env_steps, r.gradient_steps, r.episodes), (0, 0, 0));
        assert!(rows.is_empty());
    }

    #[test]
    fn rows_at_interval_and_end() {
        let mut env = GmmBandit::new();
        let mut eval_env = GmmBandit::new();
        let mut t = Trainer::new(small_cfg(), env.spec().clone(), "gmm-bandit").unwrap();
        let mut rows: Vec<MetricsRow> = Vec::new();
        let r = t.run(&mut env, &mut eval_env, &mut rows).unwrap();
        let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![25, 50, 60]);
        assert_eq!(r.episodes, 60);
        // learning starts once the buffer holds 20 transitions
        assert_eq!(r.gradient_steps, 41);
        assert!(rows.iter().all(|r| r.td_loss.is_some()));
    }

    #[test]
    fn identical_seeds_give_identical_rows() {
        let run = || {
            let mut env = GmmBandit::new();
            let mut eval_env = GmmBandit::new();
            let mut t = Trainer::new(small_cfg(), env.spec().clone(), "gmm-bandit").unwrap();
            let mut rows: Vec<MetricsRow> = Vec::new();
            t.run(&mut env, &mut eval_env, &mut rows).unwrap();
            rows
        };
        assert_eq!(run(), run());
    }

    fn constant_critics(value: f64) -> CriticSet {
        let cfg = CriticConfig {
            hidden_dim: 4,
            hidden_layers: 1,
            activation: Activation::Mish,
            learning_rate: 1e-3,
            polyak_rate: 1.0,
            twin: true,
            behavior_target: true,
        };
        let mut c = CriticSet::new(1, 2, &cfg, 0).unwrap();
        for net in c.networks_mut() {
            let n = net.params().len();
            let vals = net.params_mut().values_mut();
            vals.iter_mut().for_each(|v| *v = 0.0);
            vals[n - 1] = value;
        }
        c
    }

    fn bandit_batch() -> Batch {
        let items: Vec<Transition> = (0..8)
            .map(|i| Transition {
                state: vec![0.0],
                action: vec![i as f64 - 4.0, 1.0],
                reward: 0.0,
                next_state: vec![0.0],
                terminal: true,
            })
            .collect();
        Batch::from_transitions(&items).unwrap()
    }

    #[test]
    fn constant_critic_leaves_only_the_constraint_gradient() {
        let flow = FlowConfig::new(1, vec![-14.0; 2], vec![14.0; 2]).unwrap();
        let critics = constant_critics(3.0);
        let batch = bandit_batch();
        let weighting = WeightingConfig::default();
        let mut actor = MlpField::new(1, 2, 8, 2, Activation::Elu, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let terms = accumulate_actor_gradients(&mut actor, &critics, &batch, 0.0, &weighting, &flow, &mut rng).unwrap();
        assert!((terms.q_term - 3.0).abs() < 1e-12);
        assert!(actor.net().params().gradients().iter().all(|g| *g == 0.0));
        // equal Q everywhere: centred gaps are zero, so every weight is zero
        assert_eq!(terms.mean_weight, 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_q_maximization() {
        let flow = FlowConfig::new(1, vec![-14.0; 2], vec![14.0; 2]).unwrap();
        let cfg = CriticConfig {
            hidden_dim: 6,
            hidden_layers: 1,
            activation: Activation::Mish,
            learning_rate: 1e-3,
            polyak_rate: 1.0,
            twin: true,
            behavior_target: true,
        };
        let critics = CriticSet::new(1, 2, &cfg, 4).unwrap();
        let batch = bandit_batch();
        // a linear weight on negative-only gaps without centring is all zero
        let weighting = WeightingConfig {
            kind: WeightingKind::LinearIndicator,
            mean_normalize: false,
            max_weight: f64::INFINITY,
        };
        let mut q_beta_low = critics.clone();
        let n = q_beta_low.q_beta_star.params().len();
        q_beta_low.q_beta_star.params_mut().values_mut().iter_mut().for_each(|v| *v = 0.0);
        q_beta_low.q_beta_star.params_mut().values_mut()[n - 1] = -1e6;

        let base = MlpField::new(1, 2, 8, 2, Activation::Elu, 1).unwrap();
        let mut with_lambda = base.clone();
        let mut without = base.clone();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let t1 = accumulate_actor_gradients(&mut with_lambda, &q_beta_low, &batch, 0.1, &weighting, &flow, &mut r1).unwrap();
        accumulate_actor_gradients(&mut without, &q_beta_low, &batch, 0.0, &weighting, &flow, &mut r2).unwrap();
        assert_eq!(t1.mean_weight, 0.0);
        assert_eq!(with_lambda.net().params().gradients(), without.net().params().gradients());
        assert!(without.net().params().gradients().iter().any(|g| *g != 0.0));
    }
}
