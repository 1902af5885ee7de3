//! Flow-matching actor: ODE action sampling and conditional flow matching.
//!
//! An action is produced by transporting Gaussian noise `a0` along
//! `da/dt = v(t, s, a)` from `t = 0` to `t = 1` with a fixed number of
//! midpoint-Euler steps. Every velocity evaluation keeps its tape so the final
//! action can be differentiated with respect to the field parameters through
//! the whole integration chain.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec, Tape};

/// A time-dependent, state-conditioned velocity field over the action space.
///
/// Rows of `times`, `states` and `actions` describe independent queries.
pub trait VelocityField {
    type Tape;

    fn state_dim(&self) -> usize;

    fn action_dim(&self) -> usize;

    fn forward(
        &self,
        times: ArrayView1<'_, f64>,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Self::Tape)>;

    /// Accumulates parameter gradients for `cotangent` (one row per query) and
    /// returns the cotangent with respect to the action inputs.
    fn backward(&mut self, tape: &Self::Tape, cotangent: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// `v(t, s, a) = coef * a + offset`, parameter-free.
///
/// Covers the constant field (`coef = 0`) and linear decay (`coef = -1`).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub state_dim: usize,
    pub coef: f64,
    pub offset: Vec<f64>,
}

impl AffineField {
    pub fn constant(state_dim: usize, c: Vec<f64>) -> Self {
        Self {
            state_dim,
            coef: 0.0,
            offset: c,
        }
    }
}

impl VelocityField for AffineField {
    type Tape = ();

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.offset.len()
    }

    fn forward(
        &self,
        _times: ArrayView1<'_, f64>,
        _states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, ())> {
        ensure_len("action width", actions.ncols(), self.offset.len())?;
        let c = ArrayView1::from(&self.offset[..]);
        Ok((actions.mapv(|a| self.coef * a) + &c, ()))
    }

    fn backward(&mut self, _tape: &(), cotangent: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(cotangent.mapv(|g| self.coef * g))
    }
}

/// The policy network: an MLP over the concatenated input `[t, s, a]`.
///
/// Time enters as the raw scalar in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl MlpField {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let spec = MlpSpec::new(1 + state_dim + action_dim, hidden_dim, hidden_layers, action_dim, activation)?;
        Ok(Self {
            net: Mlp::new(spec, seed),
            state_dim,
            action_dim,
        })
    }

    pub fn from_net(net: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        ensure_len("field input width", net.spec().input_dim(), 1 + state_dim + action_dim)?;
        ensure_len("field output width", net.spec().output_dim(), action_dim)?;
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }
}

impl VelocityField for MlpField {
    type Tape = Tape;

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn forward(
        &self,
        times: ArrayView1<'_, f64>,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Tape)> {
        let n = actions.nrows();
        ensure_len("time rows", times.len(), n)?;
        ensure_len("state rows", states.nrows(), n)?;
        ensure_len("state width", states.ncols(), self.state_dim)?;
        ensure_len("action width", actions.ncols(), self.action_dim)?;
        let mut x = Array2::<f64>::zeros((n, 1 + self.state_dim + self.action_dim));
        x.column_mut(0).assign(&times);
        x.slice_mut(s![.., 1..1 + self.state_dim]).assign(&states);
        x.slice_mut(s![.., 1 + self.state_dim..]).assign(&actions);
        self.net.forward_batch(x.view())
    }

    fn backward(&mut self, tape: &Tape, cotangent: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let dx = self.net.backward_batch(tape, cotangent)?;
        Ok(dx.slice(s![.., 1 + self.state_dim..]).to_owned())
    }
}

/// Integrator used for action sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OdeSolver {
    /// Two-stage RK2: `a += h * v(t + h/2, s, a + h/2 * v(t, s, a))`.
    #[default]
    MidpointEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub flow_steps: usize,
    pub solver: OdeSolver,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl FlowConfig {
    pub fn new(flow_steps: usize, action_low: Vec<f64>, action_high: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            flow_steps,
            solver: OdeSolver::MidpointEuler,
            action_low,
            action_high,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unbounded action space, for transport tests and distribution matching.
    pub fn unbounded(flow_steps: usize, action_dim: usize) -> Result<Self> {
        Self::new(
            flow_steps,
            vec![f64::NEG_INFINITY; action_dim],
            vec![f64::INFINITY; action_dim],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.flow_steps == 0 {
            return Err(Error::invalid("flow_steps must be >= 1"));
        }
        ensure_len("action_high", self.action_high.len(), self.action_low.len())?;
        if self.action_low.is_empty() {
            return Err(Error::invalid("action dimension must be >= 1"));
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid("action_low must be < action_high elementwise"));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }
}

/// One batched integration from noise to bounded actions, with everything
/// needed to backpropagate through it.
pub struct FlowRollout<T> {
    // a at every knot, before clipping; knots[0] is the noise
    knots: Vec<Array2<f64>>,
    // per step: tapes of the two stage evaluations
    stages: Vec<(T, T)>,
    // per step: the first-stage velocity
    first_velocities: Vec<Array2<f64>>,
    // per step: the midpoint-stage velocity
    mid_velocities: Vec<Array2<f64>>,
    actions: Array2<f64>,
    clipped: Array2<bool>,
    step_width: f64,
}

impl<T> FlowRollout<T> {
    /// Bounded final actions, one row per state.
    pub fn actions(&self) -> &Array2<f64> {
        &self.actions
    }

    pub fn into_actions(self) -> Array2<f64> {
        self.actions
    }

    pub fn noise(&self) -> &Array2<f64> {
        &self.knots[0]
    }

    /// Integration states `a^t` at `t = k/N`, `k = 0..=N`, before bounding.
    pub fn knots(&self) -> &[Array2<f64>] {
        &self.knots
    }

    /// `(v(t_k, s, a_k), v(t_k + h/2, s, midpoint))` for every step `k`.
    pub fn velocities(&self) -> impl Iterator<Item = (&Array2<f64>, &Array2<f64>)> {
        self.first_velocities.iter().zip(&self.mid_velocities)
    }

    /// Backpropagates `cotangent` (w.r.t. the bounded actions) through the
    /// clip and every integration step, accumulating parameter gradients into
    /// `field`. Returns the cotangent with respect to the noise.
    ///
    /// Clipped coordinates pass zero gradient.
    pub fn backward<F>(&self, field: &mut F, cotangent: ArrayView2<'_, f64>) -> Result<Array2<f64>>
    where
        F: VelocityField<Tape = T>,
    {
        ensure_len("cotangent rows", cotangent.nrows(), self.actions.nrows())?;
        ensure_len("cotangent width", cotangent.ncols(), self.actions.ncols())?;
        let h = self.step_width;
        let mut g = cotangent.to_owned();
        g.zip_mut_with(&self.clipped, |x, &c| {
            if c {
                *x = 0.0
            }
        });
        for (first, mid) in self.stages.iter().rev() {
            // a_{k+1} = a_k + h * v2(m), m = a_k + h/2 * v1(a_k)
            let dm = field.backward(mid, (&g * h).view())?;
            let da_first = field.backward(first, (&dm * (0.5 * h)).view())?;
            g = g + &dm + &da_first;
        }
        Ok(g)
    }
}

fn check_finite(v: &Array2<f64>, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical("velocity field output", step))
    }
}

/// Integrates `noise` rows to bounded actions for the matching `states` rows.
pub fn rollout<F: VelocityField>(
    field: &F,
    states: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
    cfg: &FlowConfig,
) -> Result<FlowRollout<F::Tape>> {
    let n = noise.nrows();
    ensure_len("noise width", noise.ncols(), field.action_dim())?;
    ensure_len("noise width", noise.ncols(), cfg.action_dim())?;
    ensure_len("state rows", states.nrows(), n)?;
    let steps = cfg.flow_steps;
    let h = 1.0 / steps as f64;
    let mut a = noise.to_owned();
    let mut knots = Vec::with_capacity(steps + 1);
    let mut stages = Vec::with_capacity(steps);
    let mut first_velocities = Vec::with_capacity(steps);
    let mut mid_velocities = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * h;
        let times = Array1::from_elem(n, t);
        let (v1, tape1) = field.forward(times.view(), states, a.view())?;
        check_finite(&v1, k)?;
        let mid = &a + &(&v1 * (0.5 * h));
        let times_mid = Array1::from_elem(n, t + 0.5 * h);
        let (v2, tape2) = field.forward(times_mid.view(), states, mid.view())?;
        check_finite(&v2, k)?;
        let next = &a + &(&v2 * h);
        knots.push(a);
        a = next;
        stages.push((tape1, tape2));
        first_velocities.push(v1);
        mid_velocities.push(v2);
    }
    let mut actions = a.clone();
    let mut clipped = Array2::from_elem(actions.raw_dim(), false);
    for (mut row, mut crow) in actions.axis_iter_mut(Axis(0)).zip(clipped.axis_iter_mut(Axis(0))) {
        for j in 0..row.len() {
            let (lo, hi) = (cfg.action_low[j], cfg.action_high[j]);
            if row[j] < lo {
                row[j] = lo;
                crow[j] = true;
            } else if row[j] > hi {
                row[j] = hi;
                crow[j] = true;
            }
        }
    }
    knots.push(a);
    Ok(FlowRollout {
        knots,
        stages,
        first_velocities,
        mid_velocities,
        actions,
        clipped,
        step_width: h,
    })
}

/// A single integrated action together with its trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub noise: Vec<f64>,
    /// `a^t` at each solver knot `t = k/N`, `k = 0..=N`, before bounding.
    pub knots: Vec<Vec<f64>>,
    /// `(first stage, midpoint stage)` velocity per step.
    pub velocities: Vec<(Vec<f64>, Vec<f64>)>,
    pub action: Vec<f64>,
}

/// Integrates one noise vector for one state.
pub fn sample_action<F: VelocityField>(
    field: &F,
    state: &[f64],
    noise: &[f64],
    cfg: &FlowConfig,
) -> Result<FlowSample> {
    ensure_len("state", state.len(), field.state_dim())?;
    let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
    let z = ArrayView2::from_shape((1, noise.len()), noise).expect("row");
    let r = rollout(field, s, z, cfg)?;
    let row = |m: &Array2<f64>| m.row(0).to_vec();
    Ok(FlowSample {
        noise: noise.to_vec(),
        knots: r.knots.iter().map(row).collect(),
        velocities: r.velocities().map(|(a, b)| (row(a), row(b))).collect(),
        action: row(&r.actions),
    })
}

/// Standard-normal noise, one row per sample.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, dim), || rng.sample(StandardNormal))
}

/// Straight-line path `a^t = t a1 + (1 - t) a0` and its target velocity `a1 - a0`.
pub fn interpolate_path(a0: &[f64], a1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_len("a1", a1.len(), a0.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t must lie in [0, 1], got {t}")));
    }
    let at = a0.iter().zip(a1).map(|(x0, x1)| t * x1 + (1.0 - t) * x0).collect();
    let u = a0.iter().zip(a1).map(|(x0, x1)| x1 - x0).collect();
    Ok((at, u))
}

/// Fresh `(t, a0)` per batch element for one flow-matching estimate.
#[derive(Debug, Clone)]
pub struct CfmDraw {
    pub times: Array1<f64>,
    pub noise: Array2<f64>,
}

impl CfmDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rows: usize, action_dim: usize) -> Self {
        let times = Array1::from_shape_simple_fn(rows, || rng.random::<f64>());
        let noise = gaussian_noise(rng, rows, action_dim);
        Self { times, noise }
    }
}

/// `mean_i w_i * || v(t_i, s_i, a_i^t) - (a_i - a0_i) ||^2`.
///
/// When `grad_scale != 0` the gradient of `grad_scale * loss` is accumulated
/// into the field parameters. Weights are constants.
pub fn weighted_cfm_loss<F: VelocityField>(
    field: &mut F,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    draw: &CfmDraw,
    grad_scale: f64,
) -> Result<f64> {
    let n = actions.nrows();
    if n == 0 {
        return Err(Error::invalid("empty flow-matching batch"));
    }
    ensure_len("weights", weights.len(), n)?;
    ensure_len("times", draw.times.len(), n)?;
    ensure_len("noise rows", draw.noise.nrows(), n)?;
    ensure_len("noise width", draw.noise.ncols(), actions.ncols())?;
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::invalid(format!("flow-matching weights must be >= 0, got {w}")));
    }
    if let Some(t) = draw.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("t must lie in [0, 1], got {t}")));
    }
    let t_col = draw.times.view().insert_axis(Axis(1));
    let a0 = &draw.noise;
    let at = &actions * &t_col + a0 * &t_col.mapv(|t| 1.0 - t);
    let target = &actions - a0;
    let (v, tape) = field.forward(draw.times.view(), states, at.view())?;
    let resid = v - target;
    let w_col = weights.insert_axis(Axis(1));
    let loss = (resid.mapv(|r| r * r).sum_axis(Axis(1)) * &weights).sum() / n as f64;
    if !loss.is_finite() {
        return Err(Error::numerical("weighted flow-matching loss", 0));
    }
    if grad_scale != 0.0 {
        let cot = &resid * &w_col * (2.0 * grad_scale / n as f64);
        field.backward(&tape, cot.view())?;
    }
    Ok(loss)
}
