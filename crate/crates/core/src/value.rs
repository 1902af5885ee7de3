//! Critic learning.
//!
//! `Q^pi` (twin critics with Polyak-averaged targets) is fit by TD regression
//! onto `r + gamma (1 - done) min_k Q_targ_k(s', a')` with `a'` sampled from the
//! current flow policy. The behavior-optimal pair `(Q^beta*, V^beta*)` is fit by
//! expectile regression of `V` onto `Q(s, a)` over buffer actions and
//! least-squares regression of `Q` onto `r + gamma (1 - done) V(s')`; with a
//! high expectile `V` tracks the best actions in the buffer without an explicit
//! max. By default `V` regresses onto a Polyak-averaged copy of `Q^beta*`; the
//! undamped alternation can run away under function approximation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{gaussian_noise, rollout, FlowConfig, VelocityField};
use crate::nn::{adam_step, Activation, AdamConfig, Mlp, MlpSpec};
use crate::replay::Batch;

/// Asymmetric squared loss `|tau - 1(x < 0)| x^2`.
pub fn expectile_loss(x: f64, tau: f64) -> f64 {
    let w = if x < 0.0 { 1.0 - tau } else { tau };
    w * x * x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectileConfig {
    pub tau: f64,
}

impl ExpectileConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("expectile tau must lie in (0, 1), got {tau}")));
        }
        Ok(Self { tau })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub polyak_rate: f64,
    pub twin: bool,
    /// Regress `V^beta*` onto a target copy of `Q^beta*` instead of the online net.
    pub behavior_target: bool,
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.polyak_rate > 0.0 && self.polyak_rate <= 1.0) {
            return Err(Error::invalid(format!(
                "polyak_rate must lie in (0, 1], got {}",
                self.polyak_rate
            )));
        }
        AdamConfig::new(self.learning_rate)?;
        Ok(())
    }
}

/// Every value network of the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSet {
    /// One or two online critics for the current policy.
    pub q_pi: Vec<Mlp>,
    pub q_pi_targ: Vec<Mlp>,
    pub q_beta_star: Mlp,
    pub q_beta_targ: Mlp,
    pub v_beta_star: Mlp,
    pub polyak_rate: f64,
    pub behavior_target: bool,
    pub adam: AdamConfig,
    state_dim: usize,
    action_dim: usize,
}

/// `[s, a]` rows for a Q-network.
pub fn state_action(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, sd) = states.dim();
    let ad = actions.ncols();
    let mut x = Array2::zeros((n, sd + ad));
    x.slice_mut(s![.., ..sd]).assign(&states);
    x.slice_mut(s![.., sd..]).assign(&actions);
    x
}

fn check_finite(v: &Array1<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(what, 0))
    }
}

fn column(y: Array2<f64>) -> Array1<f64> {
    y.column(0).to_owned()
}

/// Mean squared error regression of a scalar network onto constant targets;
/// takes one Adam step and returns the loss before the step.
fn regress(net: &mut Mlp, x: ArrayView2<'_, f64>, targets: ArrayView1<'_, f64>, adam: &AdamConfig) -> Result<f64> {
    let (pred, tape) = net.forward_batch(x)?;
    let n = targets.len() as f64;
    let resid = &pred.column(0) - &targets;
    let loss = resid.mapv(|r| r * r).sum() / n;
    if !loss.is_finite() {
        return Err(Error::numerical("squared regression loss", 0));
    }
    let cot = resid.mapv(|r| 2.0 * r / n).insert_axis(ndarray::Axis(1));
    net.backward_batch(&tape, cot.view())?;
    adam_step(net.params_mut(), adam);
    Ok(loss)
}

/// Expectile regression of `v_net(states)` onto constant `q_targets`; one Adam
/// step. Returns the loss before the step.
pub fn update_value_expectile(
    v_net: &mut Mlp,
    states: ArrayView2<'_, f64>,
    q_targets: ArrayView1<'_, f64>,
    cfg: &ExpectileConfig,
    adam: &AdamConfig,
) -> Result<f64> {
    let (v, tape) = v_net.forward_batch(states)?;
    let n = q_targets.len() as f64;
    let diff = &q_targets - &v.column(0);
    let loss = diff.iter().map(|&x| expectile_loss(x, cfg.tau)).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::numerical("expectile loss", 0));
    }
    // d/dV of w (q - V)^2 = -2 w (q - V)
    let cot = diff
        .mapv(|x| {
            let w = if x < 0.0 { 1.0 - cfg.tau } else { cfg.tau };
            -2.0 * w * x / n
        })
        .insert_axis(ndarray::Axis(1));
    v_net.backward_batch(&tape, cot.view())?;
    adam_step(v_net.params_mut(), adam);
    Ok(loss)
}

impl CriticSet {
    pub fn new(state_dim: usize, action_dim: usize, cfg: &CriticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let q_spec = MlpSpec::new(state_dim + action_dim, cfg.hidden_dim, cfg.hidden_layers, 1, cfg.activation)?;
        let v_spec = MlpSpec::new(state_dim, cfg.hidden_dim, cfg.hidden_layers, 1, cfg.activation)?;
        let n_q = if cfg.twin { 2 } else { 1 };
        let q_pi: Vec<Mlp> = (0..n_q).map(|k| Mlp::new(q_spec, seed.wrapping_add(k as u64))).collect();
        let q_beta_star = Mlp::new(q_spec, seed.wrapping_add(10));
        Ok(Self {
            q_pi_targ: q_pi.clone(),
            q_pi,
            q_beta_targ: q_beta_star.clone(),
            q_beta_star,
            v_beta_star: Mlp::new(v_spec, seed.wrapping_add(11)),
            polyak_rate: cfg.polyak_rate,
            behavior_target: cfg.behavior_target,
            adam: AdamConfig::new(cfg.learning_rate)?,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// All networks in a fixed order: online critics, their targets,
    /// `Q^beta*`, its target, `V^beta*`.
    pub fn networks(&self) -> Vec<&Mlp> {
        let mut v: Vec<&Mlp> = self.q_pi.iter().chain(&self.q_pi_targ).collect();
        v.extend([&self.q_beta_star, &self.q_beta_targ, &self.v_beta_star]);
        v
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v: Vec<&mut Mlp> = self.q_pi.iter_mut().chain(self.q_pi_targ.iter_mut()).collect();
        v.extend([&mut self.q_beta_star, &mut self.q_beta_targ, &mut self.v_beta_star]);
        v
    }

    fn min_over(nets: &[Mlp], x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let mut out: Option<Array1<f64>> = None;
        for net in nets {
            let q = column(net.predict(x)?);
            out = Some(match out {
                None => q,
                Some(m) => ndarray::Zip::from(&m).and(&q).map_collect(|a, b| a.min(*b)),
            });
        }
        Ok(out.expect("at least one critic"))
    }

    /// `min_k Q_k(s, a)` over the online critics.
    pub fn q_pi_min(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Self::min_over(&self.q_pi, state_action(states, actions).view())
    }

    /// `min_k Q_targ_k(s, a)` over the target critics.
    pub fn q_targ_min(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Self::min_over(&self.q_pi_targ, state_action(states, actions).view())
    }

    pub fn q_beta(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(column(self.q_beta_star.predict(state_action(states, actions).view())?))
    }

    pub fn v_beta(&self, states: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(column(self.v_beta_star.predict(states)?))
    }

    /// TD targets `r + gamma (1 - done) min_k Q_targ_k(s', a')` for given next actions.
    pub fn td_targets(&self, batch: &Batch, next_actions: ArrayView2<'_, f64>, gamma: f64) -> Result<Array1<f64>> {
        let q_next = self.q_targ_min(batch.next_states.view(), next_actions)?;
        let y = &batch.rewards + &(q_next * &batch.terminals.mapv(|d| gamma * (1.0 - d)));
        check_finite(&y, "TD target")?;
        Ok(y)
    }
}

/// One TD step for every online critic of the current policy. Returns the mean
/// squared TD error averaged over the critics.
pub fn update_q_pi<F, R>(
    critics: &mut CriticSet,
    field: &F,
    batch: &Batch,
    gamma: f64,
    flow_cfg: &FlowConfig,
    rng: &mut R,
) -> Result<f64>
where
    F: VelocityField,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let noise = gaussian_noise(rng, batch.len(), critics.action_dim);
    let next = rollout(field, batch.next_states.view(), noise.view(), flow_cfg)?;
    let y = critics.td_targets(batch, next.actions().view(), gamma)?;
    let x = state_action(batch.states.view(), batch.actions.view());
    let adam = critics.adam;
    let mut total = 0.0;
    for net in critics.q_pi.iter_mut() {
        total += regress(net, x.view(), y.view(), &adam)?;
    }
    Ok(total / critics.q_pi.len() as f64)
}

/// One expectile step for `V^beta*` followed by one TD step for `Q^beta*`
/// (which bootstraps from the freshly updated `V`). Returns `(v_loss, q_loss)`.
pub fn update_behavior_critics(
    critics: &mut CriticSet,
    batch: &Batch,
    gamma: f64,
    expectile: &ExpectileConfig,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let adam = critics.adam;
    let x = state_action(batch.states.view(), batch.actions.view());
    let q_net = if critics.behavior_target {
        &critics.q_beta_targ
    } else {
        &critics.q_beta_star
    };
    let q_sa = column(q_net.predict(x.view())?);
    let v_loss = update_value_expectile(
        &mut critics.v_beta_star,
        batch.states.view(),
        q_sa.view(),
        expectile,
        &adam,
    )?;
    let v_next = critics.v_beta(batch.next_states.view())?;
    let y = &batch.rewards + &(v_next * &batch.terminals.mapv(|d| gamma * (1.0 - d)));
    check_finite(&y, "behavior-optimal Q target")?;
    let q_loss = regress(&mut critics.q_beta_star, x.view(), y.view(), &adam)?;
    Ok((v_loss, q_loss))
}

fn blend(targ: &mut Mlp, online: &Mlp, rho: f64) {
    for (t, &o) in targ.params_mut().values_mut().iter_mut().zip(online.params().values()) {
        *t = (1.0 - rho) * *t + rho * o;
    }
}

/// `targ <- (1 - rho) targ + rho online` for every target network.
pub fn polyak_update(critics: &mut CriticSet) {
    let rho = critics.polyak_rate;
    for (targ, online) in critics.q_pi_targ.iter_mut().zip(&critics.q_pi) {
        blend(targ, online, rho);
    }
    if critics.behavior_target {
        blend(&mut critics.q_beta_targ, &critics.q_beta_star, rho);
    }
}
