//! Value-weighted flow matching on the ten-mode Gaussian ring.
//!
//! Samples from the mixture are weighted by `f(d(a) - mean d)` with the
//! quadratic value gap `d` peaking at `(0, 8.66)` and `f(x) = 1(x > 0) x`.
//! A flow trained on the weighted loss should reproduce the grid oracle
//! `f * p / Z`; an unweighted flow reproduces the mixture itself.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bound::{conditional_velocity, estimate_lipschitz, w2_bound_rhs, W2BoundReport};
use super::grid::{distribution_match_score, reweight_oracle, GridDistribution, GridSpec};
use super::w2::{empirical_w2_sq, SampleSet};
use crate::env::{toy_q_gap, GmmSpec};
use crate::error::Result;
use crate::flow::{gaussian_noise, rollout, weighted_cfm_loss, CfmDraw, FlowConfig, MlpField};
use crate::nn::{adam_step, Activation, AdamConfig};
use crate::par::Execution;
use crate::trainer::{compute_weights, WeightingConfig, WeightingKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_data: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub learning_rate: f64,
    pub n_eval: usize,
    /// Points per side for the transport-bound check.
    pub n_w2: usize,
    pub lipschitz_pairs: usize,
    pub bound_mc: usize,
    pub bound_time_knots: usize,
    pub grid: GridSpec,
    /// Radius around a mode that counts as "at" the mode.
    pub mode_radius: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_data: 50_000,
            train_steps: 20_000,
            batch_size: 256,
            hidden_dim: 64,
            hidden_layers: 3,
            learning_rate: 2e-3,
            n_eval: 20_000,
            n_w2: 1000,
            lipschitz_pairs: 10_000,
            bound_mc: 2000,
            bound_time_knots: 20,
            grid: GridSpec::square(-14.0, 14.0, 50),
            mode_radius: 3.0,
            seed: 0,
        }
    }
}

/// Per-flow outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFlowReport {
    pub tv_to_oracle: f64,
    pub tv_to_base: f64,
    /// Fraction of samples within `mode_radius` of either target mode.
    pub near_target_modes: f64,
    pub final_loss: f64,
    pub bound: W2BoundReport,
    /// Wall-clock time spent on the bound check.
    pub bound_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub guided: ToyFlowReport,
    pub unguided: ToyFlowReport,
    /// Indices of the two modes carrying the most oracle mass.
    pub target_modes: [usize; 2],
    /// Oracle mass within `mode_radius` of the target modes.
    pub oracle_near_target_modes: f64,
    /// Mean of `d` over the training data, subtracted before weighting.
    pub gap_mean: f64,
    #[serde(skip)]
    pub guided_samples: Array2<f64>,
    #[serde(skip)]
    pub unguided_samples: Array2<f64>,
    #[serde(skip)]
    pub oracle: Option<GridDistribution>,
}

pub fn toy_weighting() -> WeightingConfig {
    WeightingConfig {
        kind: WeightingKind::LinearIndicator,
        mean_normalize: true,
        max_weight: f64::INFINITY,
    }
}

/// Gaps `d(a_i)` and their weights over a data set.
pub fn data_weights(gmm: &GmmSpec, data: &Array2<f64>) -> Result<(Vec<f64>, f64)> {
    let d: Vec<f64> = data.rows().into_iter().map(|r| toy_q_gap(gmm, [r[0], r[1]])).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let w = compute_weights(&d, &vec![0.0; d.len()], &toy_weighting())?;
    Ok((w, mean))
}

/// Grid oracle for `f(d(a) - gap_mean) * p(a)`.
pub fn toy_oracle(gmm: &GmmSpec, gap_mean: f64, grid: &GridSpec) -> Result<GridDistribution> {
    let weight = |p: [f64; 2]| (toy_q_gap(gmm, p) - gap_mean).max(0.0);
    reweight_oracle(&|p| gmm.density(p), &weight, grid)
}

/// Trains a flow on `data` with per-sample `weights` under a cosine learning
/// rate decay; returns it with the mean loss of the last 1% of steps.
pub fn train_flow(cfg: &ToyConfig, data: &Array2<f64>, weights: &[f64], seed: u64) -> Result<(MlpField, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = MlpField::new(1, 2, cfg.hidden_dim, cfg.hidden_layers, Activation::Elu, rng.random())?;
    let mut adam = AdamConfig::new(cfg.learning_rate)?;
    let states = Array2::zeros((cfg.batch_size, 1));
    let tail = (cfg.train_steps / 100).max(1);
    let mut tail_loss = 0.0;
    for step in 0..cfg.train_steps {
        let progress = step as f64 / cfg.train_steps as f64;
        adam.learning_rate = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()).max(1e-3);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.nrows())).collect();
        let batch = data.select(Axis(0), &idx);
        let w = Array1::from_iter(idx.iter().map(|&i| weights[i]));
        let draw = CfmDraw::sample(&mut rng, cfg.batch_size, 2);
        let loss = weighted_cfm_loss(&mut field, states.view(), batch.view(), w.view(), &draw, 1.0)?;
        adam_step(field.net_mut().params_mut(), &adam);
        if step + tail >= cfg.train_steps {
            tail_loss += loss / tail as f64;
        }
    }
    Ok((field, tail_loss))
}

/// `n` actions from the flow with the toy's step count and bounds.
pub fn sample_flow(field: &MlpField, gmm: &GmmSpec, n: usize, seed: u64) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flow = FlowConfig::new(gmm.toy_flow_steps, vec![-14.0; 2], vec![14.0; 2])?;
    let noise = gaussian_noise(&mut rng, n, 2);
    let states = Array2::zeros((n, 1));
    Ok(rollout(field, states.view(), noise.view(), &flow)?.into_actions())
}

/// `n` rows resampled from `data` with probability proportional to `weights`.
pub fn weighted_resample<R: Rng + ?Sized>(data: &Array2<f64>, weights: &[f64], n: usize, rng: &mut R) -> Array2<f64> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let idx: Vec<usize> = (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c <= u).min(weights.len() - 1)
        })
        .collect();
    data.select(Axis(0), &idx)
}

fn fraction_near(points: &Array2<f64>, centers: &[[f64; 2]], radius: f64) -> f64 {
    let hits = points
        .rows()
        .into_iter()
        .filter(|r| centers.iter().any(|c| (r[0] - c[0]).hypot(r[1] - c[1]) <= radius))
        .count();
    hits as f64 / points.nrows() as f64
}

/// Transport-bound check of a trained field against reference samples.
pub fn bound_report(cfg: &ToyConfig, field: &MlpField, generated: &Array2<f64>, reference: &Array2<f64>, exec: Execution) -> Result<W2BoundReport> {
    let m = cfg.n_w2.min(generated.nrows()).min(reference.nrows());
    let a = SampleSet::new(generated.slice(ndarray::s![..m, ..]).to_owned())?;
    let b = SampleSet::new(reference.slice(ndarray::s![..m, ..]).to_owned())?;
    let lhs = empirical_w2_sq(&a, &b, exec)?;
    let reference_set = SampleSet::new(reference.clone())?;
    let l = estimate_lipschitz(field, &[0.0], &reference_set, cfg.lipschitz_pairs, 1.0, cfg.seed ^ 0x11, 8, exec)?;
    let rhs = w2_bound_rhs(
        field,
        &[0.0],
        &conditional_velocity,
        &reference_set,
        l,
        cfg.bound_mc,
        cfg.bound_time_knots,
        cfg.seed ^ 0x22,
        exec,
    )?;
    Ok(W2BoundReport {
        empirical_w2_sq: lhs,
        bound_rhs: rhs,
        lipschitz_estimate: l,
        monte_carlo_samples: cfg.bound_mc * cfg.bound_time_knots,
    })
}

/// Runs guided and unguided training and scores both against the oracle.
pub fn run_toy(cfg: &ToyConfig, exec: Execution) -> Result<ToyReport> {
    let gmm = GmmSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = gmm.sample(&mut rng, cfg.n_data);
    let (weights, gap_mean) = data_weights(&gmm, &data)?;
    let oracle = toy_oracle(&gmm, gap_mean, &cfg.grid)?;
    let base = reweight_oracle(&|p| gmm.density(p), &|_| 1.0, &cfg.grid)?;

    // the two modes with the most oracle mass nearby
    let mut by_mass: Vec<(usize, f64)> = gmm
        .means
        .iter()
        .enumerate()
        .map(|(k, &m)| (k, oracle.mass_near(m, cfg.mode_radius)))
        .collect();
    by_mass.sort_by(|a, b| b.1.total_cmp(&a.1));
    let target_modes = [by_mass[0].0, by_mass[1].0];
    let centers = [gmm.means[target_modes[0]], gmm.means[target_modes[1]]];
    let oracle_near = by_mass[0].1 + by_mass[1].1;

    let ones = vec![1.0; data.nrows()];
    let seeds = [rng.random::<u64>(), rng.random::<u64>()];
    let sample_seeds = [rng.random::<u64>(), rng.random::<u64>()];
    let runs = exec.map(2, |k| -> Result<(MlpField, f64, Array2<f64>)> {
        let w = if k == 0 { &weights } else { &ones };
        let (field, loss) = train_flow(cfg, &data, w, seeds[k])?;
        let samples = sample_flow(&field, &gmm, cfg.n_eval, sample_seeds[k])?;
        Ok((field, loss, samples))
    });
    let mut runs = runs.into_iter();
    let (g_field, g_loss, g_samples) = runs.next().expect("two runs")?;
    let (u_field, u_loss, u_samples) = runs.next().expect("two runs")?;

    let guided_ref = weighted_resample(&data, &weights, cfg.n_w2.max(cfg.bound_mc), &mut rng);
    let unguided_ref = gmm.sample(&mut rng, cfg.n_w2.max(cfg.bound_mc));
    let flow_report = |field: &MlpField, samples: &Array2<f64>, loss: f64, reference: &Array2<f64>| -> Result<ToyFlowReport> {
        let start = Instant::now();
        let bound = bound_report(cfg, field, samples, reference, exec)?;
        Ok(ToyFlowReport {
            bound_seconds: start.elapsed().as_secs_f64(),
            tv_to_oracle: distribution_match_score(samples.view(), &oracle)?,
            tv_to_base: distribution_match_score(samples.view(), &base)?,
            near_target_modes: fraction_near(samples, &centers, cfg.mode_radius),
            final_loss: loss,
            bound,
        })
    };
    Ok(ToyReport {
        guided: flow_report(&g_field, &g_samples, g_loss, &guided_ref)?,
        unguided: flow_report(&u_field, &u_samples, u_loss, &unguided_ref)?,
        target_modes,
        oracle_near_target_modes: oracle_near,
        gap_mean,
        guided_samples: g_samples,
        unguided_samples: u_samples,
        oracle: Some(oracle),
    })
}
