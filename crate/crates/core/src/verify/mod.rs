//! Brute-force oracles and the named check suites built on them.
//!
//! Every check yields a [`CheckReport`]: `lhs` is the measured quantity,
//! `rhs` the reference, and `pass` whether they agree within `tolerance`
//! (equality checks) or `lhs <= rhs` (bound checks, `tolerance = 0`).

pub mod bound;
pub mod gradcheck;
pub mod grid;
pub mod toy;
pub mod w2;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{gaussian_noise, rollout, sample_action, AffineField, FlowConfig};
use crate::nn::{Activation, AdamConfig, Mlp, MlpSpec};
use crate::par::Execution;
use crate::value::{update_value_expectile, ExpectileConfig};
use bound::{field_reference, w2_bound_rhs};
use w2::{brute_force_w2_sq, empirical_w2_sq, gaussian_w2_sq, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub pass: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
}

impl CheckReport {
    /// `|lhs - rhs| <= tolerance`.
    pub fn close(check: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            pass: (lhs - rhs).abs() <= tolerance,
            lhs,
            rhs,
            tolerance,
        }
    }

    /// `lhs <= rhs`.
    pub fn at_most(check: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            check: check.into(),
            pass: lhs <= rhs,
            lhs,
            rhs,
            tolerance: 0.0,
        }
    }

    /// `|lhs - rhs| <= tolerance * |rhs|`.
    pub fn relative(check: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            pass: (lhs - rhs).abs() <= tolerance * rhs.abs(),
            lhs,
            rhs,
            tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    W2,
    Gradients,
    Flow,
    Expectile,
    Toy,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 6] = ["w2", "gradients", "flow", "expectile", "toy", "all"];

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "w2" => Suite::W2,
            "gradients" => Suite::Gradients,
            "flow" => Suite::Flow,
            "expectile" => Suite::Expectile,
            "toy" => Suite::Toy,
            "all" => Suite::All,
            _ => return None,
        })
    }
}

pub fn run_suite(suite: Suite, exec: Execution) -> Result<Vec<CheckReport>> {
    match suite {
        Suite::W2 => w2_suite(exec),
        Suite::Gradients => gradient_suite(exec),
        Suite::Flow => flow_suite(),
        Suite::Expectile => expectile_suite(),
        Suite::Toy => toy_suite(&toy::ToyConfig::default(), exec),
        Suite::All => {
            let mut out = Vec::new();
            for s in [Suite::W2, Suite::Gradients, Suite::Flow, Suite::Expectile, Suite::Toy] {
                out.extend(run_suite(s, exec)?);
            }
            Ok(out)
        }
    }
}

/// A random 2D Gaussian: mean uniform on `[-5, 5]^2`, covariance a random
/// rotation of eigenvalues in `[0.25, 4]`.
pub fn random_gaussian<R: Rng + ?Sized>(rng: &mut R) -> (DVector<f64>, DMatrix<f64>) {
    let mu = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
    (mu, random_covariance(rng))
}

fn random_covariance<R: Rng + ?Sized>(rng: &mut R) -> DMatrix<f64> {
    let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let rot = DMatrix::from_row_slice(2, 2, &[ang.cos(), -ang.sin(), ang.sin(), ang.cos()]);
    let diag = DMatrix::from_diagonal(&DVector::from_fn(2, |_, _| rng.random_range(0.25..4.0)));
    &rot * diag * rot.transpose()
}

/// Two random Gaussians whose means are `3..6` apart.
///
/// With 2000 draws per side the sample means wobble by about 0.06, which moves
/// `W2^2` by about `0.12 |mu1 - mu2|`; at separations below ~2 that alone
/// exceeds a 10% relative tolerance.
pub fn random_gaussian_pair<R: Rng + ?Sized>(rng: &mut R) -> [(DVector<f64>, DMatrix<f64>); 2] {
    let (mu1, cov1) = random_gaussian(rng);
    let r = rng.random_range(3.0..6.0);
    let ang: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let mu2 = &mu1 + DVector::from_vec(vec![r * ang.cos(), r * ang.sin()]);
    [(mu1, cov1), (mu2, random_covariance(rng))]
}

/// `n` draws from `N(mu, cov)` via the Cholesky factor.
pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, mu: &DVector<f64>, cov: &DMatrix<f64>, n: usize) -> Result<Array2<f64>> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
    let l = chol.l();
    let d = mu.len();
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = mu + &l * z;
        for j in 0..d {
            row[j] = x[j];
        }
    }
    Ok(out)
}

pub fn w2_suite(exec: Execution) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let pair = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Result<(f64, f64)> {
        let (a, b) = (SampleSet::from_rows(a)?, SampleSet::from_rows(b)?);
        Ok((empirical_w2_sq(&a, &b, exec)?, brute_force_w2_sq(&a, &b)?))
    };
    let (e, _) = pair(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]])?;
    out.push(CheckReport::close("w2_single_pair", e, 25.0, 1e-12));
    let (e, _) = pair(&[vec![0.0, 0.0], vec![2.0, 0.0]], &[vec![1.0, 0.0], vec![3.0, 0.0]])?;
    out.push(CheckReport::close("w2_two_pairs", e, 1.0, 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=7);
        let a: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let (e, bf) = pair(&a, &b)?;
        worst = worst.max((e - bf).abs());
    }
    out.push(CheckReport::close("w2_assignment_vs_brute_force", worst, 0.0, 1e-12));

    let i2 = DMatrix::identity(2, 2);
    let z = DVector::zeros(2);
    out.push(CheckReport::close("gaussian_w2_identical", gaussian_w2_sq(&z, &i2, &z, &i2)?, 0.0, 1e-12));
    let m = DVector::from_vec(vec![3.0, 4.0]);
    out.push(CheckReport::close("gaussian_w2_shift", gaussian_w2_sq(&z, &i2, &m, &i2)?, 25.0, 1e-12));
    out.push(CheckReport::close("gaussian_w2_scale", gaussian_w2_sq(&z, &(&i2 * 4.0), &z, &i2)?, 2.0, 1e-12));

    out.extend(w2_consistency_checks(exec)?);
    out.extend(constant_field_bound_checks(exec)?);
    Ok(out)
}

/// Empirical W2 on 2000 draws per side against the closed form, for 5 random
/// Gaussian pairs.
pub fn w2_consistency_checks(exec: Execution) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..5 {
        let [(m1, c1), (m2, c2)] = random_gaussian_pair(&mut rng);
        let a = SampleSet::new(sample_gaussian(&mut rng, &m1, &c1, 2000)?)?;
        let b = SampleSet::new(sample_gaussian(&mut rng, &m2, &c2, 2000)?)?;
        let e = empirical_w2_sq(&a, &b, exec)?;
        out.push(CheckReport::relative(format!("w2_gaussian_consistency_{k}"), e, gaussian_w2_sq(&m1, &c1, &m2, &c2)?, 0.10));
    }
    Ok(out)
}

/// Two constant fields moving the same noise: both sides of the bound equal
/// `|c1 - c2|^2` with `L = 0`.
pub fn constant_field_bound_checks(exec: Execution) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let (c1, c2) = (vec![1.0, -2.0], vec![0.5, 1.0]);
    let f1 = AffineField::constant(1, c1.clone());
    let f2 = AffineField::constant(1, c2.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = gaussian_noise(&mut rng, 500, 2);
    let states = Array2::zeros((500, 1));
    let cfg = FlowConfig::unbounded(5, 2)?;
    let x1 = rollout(&f1, states.view(), noise.view(), &cfg)?.into_actions();
    let x2 = rollout(&f2, states.view(), noise.view(), &cfg)?.into_actions();
    let lhs = empirical_w2_sq(&SampleSet::new(x1)?, &SampleSet::new(x2.clone())?, exec)?;
    let reference = field_reference(&f2, &[0.0]);
    let rhs = w2_bound_rhs(&f1, &[0.0], reference.as_ref(), &SampleSet::new(x2)?, 0.0, 1000, 10, 1, exec)?;
    let exact = (c1[0] - c2[0]).powi(2) + (c1[1] - c2[1]).powi(2);
    out.push(CheckReport::close("bound_constant_fields_lhs", lhs, exact, 1e-9));
    out.push(CheckReport::close("bound_constant_fields_rhs", rhs, exact, 1e-9));
    out.push(CheckReport::at_most("bound_constant_fields", lhs, rhs + 1e-9));
    Ok(out)
}

/// Relative-error floor for the finite-difference checks; gradients smaller
/// than this are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-6;

pub fn gradient_suite(exec: Execution) -> Result<Vec<CheckReport>> {
    Ok(vec![
        CheckReport::close("mlp_gradients_120_cases", gradcheck::mlp_gradient_sweep(120, 0, GRADIENT_FLOOR, exec)?, 0.0, 1e-4),
        CheckReport::close("flow_gradients_n1", gradcheck::flow_gradient_check(1, 1, GRADIENT_FLOOR)?, 0.0, 1e-3),
        CheckReport::close("flow_gradients_n5", gradcheck::flow_gradient_check(5, 5, GRADIENT_FLOOR)?, 0.0, 1e-3),
    ])
}

pub fn flow_suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let c = vec![0.7, -1.3];
    let field = AffineField::constant(1, c.clone());
    let a0 = [0.3, -0.9];
    for n in [1, 2, 5, 10] {
        let s = sample_action(&field, &[0.0], &a0, &FlowConfig::unbounded(n, 2)?)?;
        let err = (0..2).map(|j| (s.action[j] - (a0[j] + c[j])).abs()).fold(0.0, f64::max);
        out.push(CheckReport::close(format!("constant_field_n{n}"), err, 0.0, 1e-12));
    }
    let decay = AffineField {
        state_dim: 1,
        coef: -1.0,
        offset: vec![0.0],
    };
    for n in [1, 2, 5, 10] {
        let h = 1.0 / n as f64;
        let s = sample_action(&decay, &[0.0], &[2.0], &FlowConfig::unbounded(n, 1)?)?;
        out.push(CheckReport::close(format!("linear_decay_n{n}"), s.action[0], 2.0 * (1.0 - h + h * h / 2.0).powi(n as i32), 1e-12));
    }
    Ok(out)
}

/// The `tau`-expectile of a finite sample by bisection on its first-order
/// condition `sum_i |tau - 1(x_i < v)| (x_i - v) = 0`.
pub fn expectile_of(values: &[f64], tau: f64) -> Result<f64> {
    ExpectileConfig::new(tau)?;
    if values.is_empty() {
        return Err(Error::invalid("expectile of an empty sample"));
    }
    let score = |v: f64| -> f64 {
        values
            .iter()
            .map(|&x| if x < v { (1.0 - tau) * (x - v) } else { tau * (x - v) })
            .sum()
    };
    let (mut lo, mut hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fits a small value network on constant states to `values` by expectile
/// regression and returns its prediction.
pub fn fit_expectile(values: &[f64], tau: f64, steps: usize, seed: u64) -> Result<f64> {
    let cfg = ExpectileConfig::new(tau)?;
    let mut net = Mlp::new(MlpSpec::new(1, 16, 2, 1, Activation::Mish)?, seed);
    let states = Array2::zeros((values.len(), 1));
    let targets = Array1::from(values.to_vec());
    let mut adam = AdamConfig::new(1e-2)?;
    for k in 0..steps {
        // step the rate down so Adam settles instead of hovering at lr scale
        if k == steps / 2 || k == 3 * steps / 4 {
            adam.learning_rate *= 0.1;
        }
        update_value_expectile(&mut net, states.view(), targets.view(), &cfg, &adam)?;
    }
    Ok(net.predict(states.view())?[(0, 0)])
}

pub fn expectile_suite() -> Result<Vec<CheckReport>> {
    let fixture = [0.0, 10.0];
    let oracle = expectile_of(&fixture, 0.9)?;
    let mut out = vec![
        CheckReport::close("expectile_first_order_condition", oracle, 9.0, 1e-9),
        CheckReport::close("expectile_fit_tau_0.9", fit_expectile(&fixture, 0.9, 4000, 0)?, 9.0, 0.05),
    ];
    let mut prev = f64::NEG_INFINITY;
    let mut monotone = true;
    for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let v = fit_expectile(&fixture, tau, 4000, 1)?;
        monotone &= v > prev;
        prev = v;
    }
    out.push(CheckReport::close("expectile_monotone_in_tau", if monotone { 1.0 } else { 0.0 }, 1.0, 0.0));
    Ok(out)
}

pub fn toy_checks(report: &toy::ToyReport) -> Vec<CheckReport> {
    vec![
        CheckReport::at_most("toy_guided_tv_to_oracle", report.guided.tv_to_oracle, 0.15),
        CheckReport::at_most("toy_guided_beats_unguided", report.guided.tv_to_oracle, report.unguided.tv_to_oracle - f64::EPSILON),
        CheckReport::at_most("toy_guided_near_target_modes", 0.70, report.guided.near_target_modes),
        CheckReport::at_most("toy_bound_guided", report.guided.bound.empirical_w2_sq, report.guided.bound.bound_rhs),
        CheckReport::at_most("toy_bound_unguided", report.unguided.bound.empirical_w2_sq, report.unguided.bound.bound_rhs),
    ]
}

fn toy_suite(cfg: &toy::ToyConfig, exec: Execution) -> Result<Vec<CheckReport>> {
    Ok(toy_checks(&toy::run_toy(cfg, exec)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_relations() {
        assert!(CheckReport::close("a", 1.0, 1.05, 0.05 + 1e-12).pass);
        assert!(!CheckReport::close("a", 1.0, 1.2, 0.05).pass);
        assert!(CheckReport::at_most("b", 1.0, 1.0).pass);
        assert!(!CheckReport::relative("c", 1.2, 1.0, 0.1).pass);
        let json = serde_json::to_value(CheckReport::at_most("b", 1.0, 2.0)).unwrap();
        assert_eq!(json["check"], "b");
        assert_eq!(json["pass"], true);
        assert_eq!(json["tolerance"], 0.0);
    }

    #[test]
    fn expectile_oracle_values() {
        assert!((expectile_of(&[0.0, 10.0], 0.9).unwrap() - 9.0).abs() < 1e-9);
        assert!((expectile_of(&[0.0, 10.0], 0.5).unwrap() - 5.0).abs() < 1e-9);
        assert!((expectile_of(&[1.0, 2.0, 6.0], 0.5).unwrap() - 3.0).abs() < 1e-9);
        assert!(expectile_of(&[], 0.5).is_err());
    }

    #[test]
    fn fitted_expectile_converges() {
        let v = fit_expectile(&[0.0, 10.0], 0.9, 4000, 0).unwrap();
        assert!((v - 9.0).abs() <= 0.05, "{v}");
    }

    #[test]
    fn suite_names_parse() {
        for n in Suite::NAMES {
            assert!(Suite::parse(n).is_some());
        }
        assert!(Suite::parse("nope").is_none());
    }

    #[test]
    fn flow_and_expectile_suites_pass() {
        for r in flow_suite().unwrap().into_iter().chain(expectile_suite().unwrap()) {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn gaussian_sampler_matches_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mu, cov) = random_gaussian(&mut rng);
        let x = sample_gaussian(&mut rng, &mu, &cov, 40_000).unwrap();
        let m = x.mean_axis(ndarray::Axis(0)).unwrap();
        assert!((m[0] - mu[0]).abs() < 0.05 && (m[1] - mu[1]).abs() < 0.05);
    }
}
