//! The velocity-mismatch upper bound on the squared W2 distance between the
//! pushforwards of two flows: `e^{2L} * int_0^1 E |v_theta(t, a^t) - v_ref|^2 dt`
//! with `a^t = t a + (1 - t) a0`, `a` from the reference set and `a0 ~ N(0, I)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::w2::SampleSet;
use crate::error::{Error, Result};
use crate::flow::{gaussian_noise, VelocityField};
use crate::par::Execution;

/// Factor applied to the largest observed finite-difference slope.
pub const LIPSCHITZ_SAFETY: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2BoundReport {
    pub empirical_w2_sq: f64,
    pub bound_rhs: f64,
    pub lipschitz_estimate: f64,
    pub monte_carlo_samples: usize,
}

impl W2BoundReport {
    pub fn holds(&self) -> bool {
        self.empirical_w2_sq <= self.bound_rhs
    }
}

/// Reference velocity evaluated on `(t, a^t, a, a0)` rows.
pub type ReferenceVelocity<'a> =
    dyn Fn(ArrayView1<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> Result<Array2<f64>> + Sync + 'a;

/// The conditional straight-line velocity `a - a0`.
pub fn conditional_velocity(
    _t: ArrayView1<'_, f64>,
    _at: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    a0: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    Ok(&a - &a0)
}

/// Wraps a velocity field as a reference evaluated at `(t, state, a^t)`.
pub fn field_reference<'a, F: VelocityField + Sync>(field: &'a F, state: &'a [f64]) -> Box<ReferenceVelocity<'a>> {
    Box::new(move |t, at, _a, _a0| {
        let states = tile(state, at.nrows());
        Ok(field.forward(t, states.view(), at)?.0)
    })
}

fn tile(state: &[f64], rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, state.len()), |(_, j)| state[j])
}

fn draw_rows<R: Rng + ?Sized>(set: &SampleSet, n: usize, rng: &mut R) -> Array2<f64> {
    let pts = set.points();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..set.len())).collect();
    pts.select(Axis(0), &idx)
}

fn check_field<F: VelocityField>(field: &F, state: &[f64], reference: &SampleSet) -> Result<()> {
    if state.len() != field.state_dim() {
        return Err(Error::invalid("state width does not match the field"));
    }
    if reference.dim() != field.action_dim() {
        return Err(Error::invalid("reference points do not match the action width"));
    }
    Ok(())
}

/// `LIPSCHITZ_SAFETY * max |v(t, x) - v(t, y)| / |x - y|` over `pairs` random
/// pairs. `x` lies on a random interpolation path towards a reference point;
/// `y` is a uniform direction away from `x` at distance up to `radius`.
/// Pairs are split into `chunks` independently seeded batches.
#[allow(clippy::too_many_arguments)]
pub fn estimate_lipschitz<F: VelocityField + Sync>(
    field: &F,
    state: &[f64],
    reference: &SampleSet,
    pairs: usize,
    radius: f64,
    seed: u64,
    chunks: usize,
    exec: Execution,
) -> Result<f64> {
    check_field(field, state, reference)?;
    if pairs == 0 || chunks == 0 || !(radius > 0.0) {
        return Err(Error::invalid("need pairs, chunks >= 1 and radius > 0"));
    }
    let dim = reference.dim();
    let per = pairs.div_ceil(chunks);
    let results = exec.map(chunks, |c| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
        let n = per.min(pairs.saturating_sub(c * per));
        if n == 0 {
            return Ok(0.0);
        }
        let a = draw_rows(reference, n, &mut rng);
        let a0 = gaussian_noise(&mut rng, n, dim);
        let t = Array1::from_shape_simple_fn(n, || rng.random::<f64>());
        let tc = t.view().insert_axis(Axis(1));
        let x = &a * &tc + &a0 * &tc.mapv(|v| 1.0 - v);
        let mut dir = gaussian_noise(&mut rng, n, dim);
        for mut row in dir.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-300);
            let r = radius * rng.random::<f64>().max(1e-6);
            row.mapv_inplace(|v| v / norm * r);
        }
        let y = &x + &dir;
        let states = tile(state, n);
        let (vx, _) = field.forward(t.view(), states.view(), x.view())?;
        let (vy, _) = field.forward(t.view(), states.view(), y.view())?;
        let mut best: f64 = 0.0;
        for i in 0..n {
            let dv = (&vx.row(i) - &vy.row(i)).mapv(|v| v * v).sum().sqrt();
            let dx = dir.row(i).dot(&dir.row(i)).sqrt();
            best = best.max(dv / dx);
        }
        Ok(best)
    });
    let mut best: f64 = 0.0;
    for r in results {
        best = best.max(r?);
    }
    Ok(LIPSCHITZ_SAFETY * best)
}

/// Monte-Carlo estimate of `e^{2L} int_0^1 E |v_theta - v_ref|^2 dt` using a
/// midpoint time grid of `n_time` knots and `n_mc` draws per knot.
#[allow(clippy::too_many_arguments)]
pub fn w2_bound_rhs<F: VelocityField + Sync>(
    v_theta: &F,
    state: &[f64],
    v_ref: &ReferenceVelocity<'_>,
    reference: &SampleSet,
    lipschitz: f64,
    n_mc: usize,
    n_time: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    check_field(v_theta, state, reference)?;
    if n_mc == 0 || n_time == 0 {
        return Err(Error::invalid("need n_mc, n_time >= 1"));
    }
    if !(lipschitz >= 0.0) {
        return Err(Error::invalid("Lipschitz constant must be >= 0"));
    }
    let dim = reference.dim();
    let per_knot = exec.map(n_time, |k| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let t = Array1::from_elem(n_mc, (k as f64 + 0.5) / n_time as f64);
        let a = draw_rows(reference, n_mc, &mut rng);
        let a0 = gaussian_noise(&mut rng, n_mc, dim);
        let tc = t.view().insert_axis(Axis(1));
        let at = &a * &tc + &a0 * &tc.mapv(|v| 1.0 - v);
        let states = tile(state, n_mc);
        let (v, _) = v_theta.forward(t.view(), states.view(), at.view())?;
        let vr = v_ref(t.view(), at.view(), a.view(), a0.view())?;
        Ok((v - vr).mapv(|x| x * x).sum() / n_mc as f64)
    });
    let mut integral = 0.0;
    for m in per_knot {
        integral += m?;
    }
    Ok((2.0 * lipschitz).exp() * integral / n_time as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::AffineField;

    fn reference() -> SampleSet {
        SampleSet::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 0.0]]).unwrap()
    }

    #[test]
    fn identical_fields_give_zero() {
        let f = AffineField {
            state_dim: 1,
            coef: -0.5,
            offset: vec![0.2, 0.1],
        };
        let r = field_reference(&f, &[0.0]);
        let rhs = w2_bound_rhs(&f, &[0.0], r.as_ref(), &reference(), 0.5, 64, 8, 1, Execution::Sequential).unwrap();
        assert_eq!(rhs, 0.0);
    }

    #[test]
    fn constant_fields_give_squared_offset() {
        let f1 = AffineField::constant(1, vec![1.0, -2.0]);
        let f2 = AffineField::constant(1, vec![0.5, 1.0]);
        let r = field_reference(&f2, &[0.0]);
        let rhs = w2_bound_rhs(&f1, &[0.0], r.as_ref(), &reference(), 0.0, 16, 4, 0, Execution::Sequential).unwrap();
        assert!((rhs - 9.25).abs() < 1e-12);
        let l = estimate_lipschitz(&f1, &[0.0], &reference(), 1000, 1.0, 0, 4, Execution::Sequential).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn lipschitz_of_linear_field() {
        let f = AffineField {
            state_dim: 1,
            coef: -2.0,
            offset: vec![0.0, 0.0],
        };
        let l = estimate_lipschitz(&f, &[0.0], &reference(), 500, 1.0, 3, 2, Execution::Sequential).unwrap();
        assert!((l - 2.0 * LIPSCHITZ_SAFETY).abs() < 1e-9);
    }

    #[test]
    fn execution_modes_agree() {
        let f = AffineField {
            state_dim: 1,
            coef: 0.3,
            offset: vec![1.0, 0.0],
        };
        let run = |e| {
            w2_bound_rhs(&f, &[0.0], &conditional_velocity, &reference(), 0.1, 50, 6, 9, e).unwrap()
        };
        assert_eq!(run(Execution::Sequential).to_bits(), run(Execution::Parallel).to_bits());
    }
}
