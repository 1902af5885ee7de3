use flowrl::env::EnvSpec;
use flowrl::flow::{sample_action, AffineField, FlowConfig};
use flowrl::nn::{Activation, Mlp, MlpSpec};
use flowrl::par::Execution;
use flowrl::replay::{ReplayBuffer, Transition};
use flowrl::trainer::{compute_weights, RunConfig, WeightingConfig, WeightingKind};
use flowrl::value::expectile_loss;
use flowrl::verify::expectile_of;
use flowrl::verify::gradcheck::{mlp_check, random_mlp_case};
use flowrl::verify::grid::{reweight_oracle, GridSpec};
use flowrl::verify::w2::{brute_force_w2_sq, empirical_w2_sq, SampleSet};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kind() -> impl Strategy<Value = WeightingKind> {
    prop_oneof![Just(WeightingKind::ExpIndicator), Just(WeightingKind::LinearIndicator)]
}

fn points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), n)
}

proptest! {
    #[test]
    fn weights_are_non_negative_and_capped(
        qb in prop::collection::vec(-50.0..50.0f64, 1..40),
        shift in -20.0..20.0f64,
        kind in kind(),
        normalize in any::<bool>(),
        cap in 0.5..200.0f64,
    ) {
        let qp: Vec<f64> = qb.iter().enumerate().map(|(i, q)| q - shift + i as f64 * 0.3).collect();
        let cfg = WeightingConfig { kind, mean_normalize: normalize, max_weight: cap };
        let w = compute_weights(&qb, &qp, &cfg).unwrap();
        prop_assert_eq!(w.len(), qb.len());
        for x in w {
            prop_assert!((0.0..=cap).contains(&x));
        }
    }

    #[test]
    fn mean_normalised_weights_ignore_a_common_shift(
        d in prop::collection::vec(-5.0..5.0f64, 1..20),
        shift in -100.0..100.0f64,
        kind in kind(),
    ) {
        let cfg = WeightingConfig { kind, mean_normalize: true, max_weight: f64::INFINITY };
        let zeros = vec![0.0; d.len()];
        let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
        let a = compute_weights(&d, &zeros, &cfg).unwrap();
        let b = compute_weights(&shifted, &zeros, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn assignment_matches_brute_force_and_is_symmetric(
        (a, b) in (1usize..=7).prop_flat_map(|n| (points(n), points(n)))
    ) {
        let (a, b) = (SampleSet::from_rows(&a).unwrap(), SampleSet::from_rows(&b).unwrap());
        let ab = empirical_w2_sq(&a, &b, Execution::Sequential).unwrap();
        let ba = empirical_w2_sq(&b, &a, Execution::Sequential).unwrap();
        let bf = brute_force_w2_sq(&a, &b).unwrap();
        prop_assert!((ab - bf).abs() <= 1e-9 * (1.0 + bf));
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + bf));
    }

    #[test]
    fn w2_triangle_inequality(a in points(6), b in points(6), c in points(6)) {
        let s = |p: &Vec<Vec<f64>>| SampleSet::from_rows(p).unwrap();
        let d = |x: &SampleSet, y: &SampleSet| brute_force_w2_sq(x, y).unwrap().sqrt();
        let (a, b, c) = (s(&a), s(&b), s(&c));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn constant_fields_transport_exactly(
        c in prop::collection::vec(-10.0..10.0f64, 1..4),
        n in prop_oneof![Just(1usize), Just(2), Just(5), Just(10)],
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = flowrl::flow::gaussian_noise(&mut rng, 1, c.len());
        let field = AffineField::constant(2, c.clone());
        let s = sample_action(&field, &[0.5, -0.5], a0.row(0).as_slice().unwrap(), &FlowConfig::unbounded(n, c.len()).unwrap()).unwrap();
        for j in 0..c.len() {
            prop_assert!((s.action[j] - (a0[(0, j)] + c[j])).abs() <= 1e-12);
        }
    }

    #[test]
    fn bounded_actions_stay_in_the_box(
        off in prop::collection::vec(-30.0..30.0f64, 2),
        n in 1usize..8,
        a0 in prop::collection::vec(-4.0..4.0f64, 2),
    ) {
        let field = AffineField { state_dim: 1, coef: 0.7, offset: off };
        let cfg = FlowConfig::new(n, vec![-1.0, -2.0], vec![1.0, 0.5]).unwrap();
        let s = sample_action(&field, &[0.0], &a0, &cfg).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s.action[0]));
        prop_assert!((-2.0..=0.5).contains(&s.action[1]));
    }

    #[test]
    fn env_clip_stays_in_bounds(a in prop::collection::vec(-10.0..10.0f64, 3)) {
        let spec = EnvSpec {
            state_dim: 1,
            action_dim: 3,
            action_low: vec![-1.0, 0.0, -3.0],
            action_high: vec![1.0, 2.0, -2.0],
            max_episode_steps: 10,
        };
        let (c, clipped) = spec.clip(&a).unwrap();
        for j in 0..3 {
            prop_assert!(c[j] >= spec.action_low[j] && c[j] <= spec.action_high[j]);
        }
        prop_assert_eq!(clipped, c != a);
    }

    #[test]
    fn parameter_count_matches_layer_formula(
        i in 1usize..20, h in 1usize..40, l in 1usize..5, o in 1usize..6,
    ) {
        let spec = MlpSpec::new(i, h, l, o, Activation::Elu).unwrap();
        let expected = (i * h + h) + (l - 1) * (h * h + h) + (h * o + o);
        prop_assert_eq!(spec.param_count(), expected);
        prop_assert_eq!(Mlp::new(spec, 0).params().len(), expected);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, x, _) = random_mlp_case(&mut rng).unwrap();
        let a = net.predict(x.view()).unwrap();
        let b = net.clone().predict(x.view()).unwrap();
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn expectile_lies_in_range_and_grows_with_tau(
        xs in prop::collection::vec(-100.0..100.0f64, 1..30),
        t1 in 0.01..0.99f64,
        t2 in 0.01..0.99f64,
    ) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = expectile_of(&xs, lo).unwrap();
        let b = expectile_of(&xs, hi).unwrap();
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= min - 1e-9 && b <= max + 1e-9);
        prop_assert!(a <= b + 1e-9);
    }

    #[test]
    fn expectile_loss_is_asymmetric_square(x in -10.0..10.0f64, tau in 0.01..0.99f64) {
        let w = if x < 0.0 { 1.0 - tau } else { tau };
        prop_assert!((expectile_loss(x, tau) - w * x * x).abs() <= 1e-12);
    }

    #[test]
    fn replay_never_exceeds_capacity_and_keeps_newest(cap in 1usize..20, pushes in 0usize..60) {
        let mut buf = ReplayBuffer::new(cap, 1, 1).unwrap();
        for k in 0..pushes {
            buf.push(Transition {
                state: vec![k as f64],
                action: vec![0.0],
                reward: k as f64,
                next_state: vec![k as f64 + 1.0],
                terminal: false,
            })
            .unwrap();
            prop_assert!(buf.len() <= cap);
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        if pushes > 0 {
            prop_assert_eq!(buf.get(buf.len() - 1).unwrap().reward, (pushes - 1) as f64);
        }
    }

    #[test]
    fn config_text_round_trips(
        gamma in 0.0..0.999f64,
        lambda in 0.0..10.0f64,
        tau in 0.01..0.99f64,
        n in 1usize..20,
        seed in any::<u64>(),
    ) {
        let cfg = RunConfig::with_overrides(&format!(
            "gamma = {gamma}\nlambda = {lambda}\nexpectile_tau = {tau}\nflow_steps = {n}\nseed = {seed}"
        ))
        .unwrap();
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn oracle_masses_form_a_distribution(cx in -3.0..3.0f64, cy in -3.0..3.0f64, bins in 2usize..12) {
        let g = GridSpec::square(-4.0, 4.0, bins);
        let base = |p: [f64; 2]| (-0.5 * ((p[0] - cx).powi(2) + (p[1] - cy).powi(2))).exp();
        let o = reweight_oracle(&base, &|p| p[0].max(0.0) + 0.1, &g).unwrap();
        prop_assert!((o.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(o.masses.iter().all(|&m| m >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn mlp_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, x, cot) = random_mlp_case(&mut rng).unwrap();
        let err = mlp_check(&net, x.view(), cot.view(), 1e-6).unwrap();
        prop_assert!(err <= 1e-4, "relative error {}", err);
    }
}

#[test]
fn sample_set_rejects_ragged_rows() {
    assert!(SampleSet::from_rows(&[vec![0.0, 1.0], vec![2.0]]).is_err());
    assert!(SampleSet::new(Array2::zeros((0, 2))).is_err());
}
