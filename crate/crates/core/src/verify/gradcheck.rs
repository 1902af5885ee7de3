//! Central finite-difference checks for the MLP backward pass and for
//! backpropagation through the flow integrator.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::flow::{gaussian_noise, rollout, FlowConfig, MlpField};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::par::Execution;

/// Perturbation used by every check here.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Worst relative error for one network, over every parameter and every input
/// coordinate, of `L = sum(cotangent * net(x))`.
pub fn mlp_check(net: &Mlp, x: ArrayView2<'_, f64>, cot: ArrayView2<'_, f64>, floor: f64) -> Result<f64> {
    let loss = |m: &Mlp, x: ArrayView2<'_, f64>| -> Result<f64> { Ok((m.predict(x)? * &cot).sum()) };
    let mut net = net.clone();
    net.params_mut().zero_gradients();
    let (_, tape) = net.forward_batch(x)?;
    let dx = net.backward_batch(&tape, cot)?;
    let grads = net.params().gradients().to_vec();
    let mut worst: f64 = 0.0;
    for (i, &g) in grads.iter().enumerate() {
        let v = net.params().values()[i];
        net.params_mut().values_mut()[i] = v + FD_STEP;
        let up = loss(&net, x)?;
        net.params_mut().values_mut()[i] = v - FD_STEP;
        let down = loss(&net, x)?;
        net.params_mut().values_mut()[i] = v;
        worst = worst.max(relative_error(g, (up - down) / (2.0 * FD_STEP), floor));
    }
    let mut xp = x.to_owned();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let v = x[(r, c)];
            xp[(r, c)] = v + FD_STEP;
            let up = loss(&net, xp.view())?;
            xp[(r, c)] = v - FD_STEP;
            let down = loss(&net, xp.view())?;
            xp[(r, c)] = v;
            worst = worst.max(relative_error(dx[(r, c)], (up - down) / (2.0 * FD_STEP), floor));
        }
    }
    Ok(worst)
}

/// A random small network, batch and cotangent.
pub fn random_mlp_case<R: Rng + ?Sized>(rng: &mut R) -> Result<(Mlp, Array2<f64>, Array2<f64>)> {
    let input = rng.random_range(1..=6);
    let hidden = rng.random_range(1..=8);
    let layers = rng.random_range(1..=3);
    let output = rng.random_range(1..=3);
    let act = if rng.random::<bool>() { Activation::Mish } else { Activation::Elu };
    let spec = MlpSpec::new(input, hidden, layers, output, act)?;
    let net = Mlp::new(spec, rng.random());
    let batch = rng.random_range(1..=4);
    let x = normal_matrix(rng, batch, input);
    let cot = normal_matrix(rng, batch, output);
    Ok((net, x, cot))
}

/// Worst relative error over `cases` random networks.
pub fn mlp_gradient_sweep(cases: usize, seed: u64, floor: f64, exec: Execution) -> Result<f64> {
    let errs = exec.map(cases, |k| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let (net, x, cot) = random_mlp_case(&mut rng)?;
        mlp_check(&net, x.view(), cot.view(), floor)
    });
    let mut worst: f64 = 0.0;
    for e in errs {
        worst = worst.max(e?);
    }
    Ok(worst)
}

/// Worst relative error of `d mean_i Q(s_i, a_i(theta)) / d theta` where
/// `a(theta)` integrates fixed noise through a random field with `flow_steps`
/// unbounded midpoint steps and `Q` is a fixed random network.
pub fn flow_gradient_check(flow_steps: usize, seed: u64, floor: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sd, ad, n) = (3, 2, 6);
    let mut field = MlpField::new(sd, ad, 16, 2, Activation::Elu, rng.random())?;
    let q = Mlp::new(MlpSpec::new(sd + ad, 16, 2, 1, Activation::Mish)?, rng.random());
    let cfg = FlowConfig::unbounded(flow_steps, ad)?;
    let states = normal_matrix(&mut rng, n, sd);
    let noise = gaussian_noise(&mut rng, n, ad);
    let objective = |f: &MlpField| -> Result<f64> {
        let a = rollout(f, states.view(), noise.view(), &cfg)?.into_actions();
        let x = ndarray::concatenate![ndarray::Axis(1), states, a];
        Ok(q.predict(x.view())?.mean().unwrap_or(0.0))
    };

    field.net_mut().params_mut().zero_gradients();
    let ro = rollout(&field, states.view(), noise.view(), &cfg)?;
    let x = ndarray::concatenate![ndarray::Axis(1), states, ro.actions().view()];
    let (_, tape) = q.forward_batch(x.view())?;
    let dq = q.input_gradient(&tape, Array2::from_elem((n, 1), 1.0 / n as f64).view())?;
    let da = dq.slice(ndarray::s![.., sd..]).to_owned();
    ro.backward(&mut field, da.view())?;
    let grads = field.net().params().gradients().to_vec();

    let mut worst: f64 = 0.0;
    for (i, &g) in grads.iter().enumerate() {
        let v = field.net().params().values()[i];
        field.net_mut().params_mut().values_mut()[i] = v + FD_STEP;
        let up = objective(&field)?;
        field.net_mut().params_mut().values_mut()[i] = v - FD_STEP;
        let down = objective(&field)?;
        field.net_mut().params_mut().values_mut()[i] = v;
        worst = worst.max(relative_error(g, (up - down) / (2.0 * FD_STEP), floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-8), 0.5);
        assert!((relative_error(0.0, 1e-12, 1e-8) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (net, x, cot) = random_mlp_case(&mut rng).unwrap();
        assert!(mlp_check(&net, x.view(), cot.view(), 1e-6).unwrap() < 1e-4);
        // doubling the cotangent for the analytic pass only must show up
        let mut net2 = net.clone();
        let (_, tape) = net2.forward_batch(x.view()).unwrap();
        net2.backward_batch(&tape, (&cot * 2.0).view()).unwrap();
        let g = net2.params().gradients()[0];
        let v = net.params().values()[0];
        let f = |d: f64| {
            let mut m = net.clone();
            m.params_mut().values_mut()[0] = v + d;
            (m.predict(x.view()).unwrap() * &cot).sum()
        };
        let fd = (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
        assert!(relative_error(g, fd, 1e-6) > 0.4 || fd.abs() < 1e-9);
    }

    #[test]
    fn flow_gradients_match_at_one_and_five_steps() {
        for n in [1, 5] {
            let e = flow_gradient_check(n, 11, 1e-6).unwrap();
            assert!(e <= 1e-3, "N={n}: {e}");
        }
    }
}
