use proptest::prelude::*;

use predictor_lab::adaptation::{project, step_delay_estimate, AdaptationLaw, AdaptationState};
use predictor_lab::config::KeyValues;
use predictor_lab::history::InputHistory;
use predictor_lab::neural::{model_from_text, model_to_text, Activation, InputLayout, NeuralOperatorModel};
use predictor_lab::predictor::{integral_residual, solve_fixed_point, solve_ode_march, FixedPointOptions, PredictorGrid};
use predictor_lab::systems::{LinearScalarSystem, SystemModel};

fn filled_history(period: f64, window: f64, values: &[f64]) -> InputHistory {
    let mut h = InputHistory::new(period, window).unwrap();
    for (k, &v) in values.iter().enumerate() {
        h.push(k as f64 * period, v).unwrap();
    }
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn estimate_never_leaves_bounds(
        lo in 0.1f64..2.0,
        width in 0.0f64..3.0,
        start in 0.0f64..1.0,
        gamma in 1e-3f64..1e4,
        phis in prop::collection::vec(-1e6f64..1e6, 1..200),
        dt in 1e-5f64..1e-1,
    ) {
        let hi = lo + width;
        let mut st = AdaptationState::new(lo + start * width, lo, hi, gamma, 1.0, AdaptationLaw::Measured).unwrap();
        for phi in phis {
            st = step_delay_estimate(st, phi, dt);
            prop_assert!(st.d_hat >= lo && st.d_hat <= hi);
        }
    }

    #[test]
    fn projection_only_cancels_outward_pushes(d in 0.0f64..5.0, phi in -10.0f64..10.0) {
        let p = project(d, 1.0, 3.0, phi);
        prop_assert!(p == phi || p == 0.0);
        if d > 1.0 && d < 3.0 {
            prop_assert_eq!(p, phi);
        }
        if p == 0.0 && phi != 0.0 {
            prop_assert!((d <= 1.0 && phi < 0.0) || (d >= 3.0 && phi > 0.0));
        }
    }

    #[test]
    fn frozen_estimate_does_not_move(phi in -1e3f64..1e3) {
        let mut st = AdaptationState::new(1.5, 1.0, 2.0, 10.0, 1.0, AdaptationLaw::Frozen).unwrap();
        st.step(phi, 0.01);
        prop_assert_eq!(st.d_hat, 1.5);
    }

    #[test]
    fn history_returns_pushed_samples(values in prop::collection::vec(-5.0f64..5.0, 2..300)) {
        let period = 0.01;
        let h = filled_history(period, 1.0, &values);
        let kept = h.len();
        let n = values.len();
        for k in n - kept..n {
            prop_assert_eq!(h.sample(k as f64 * period).unwrap(), values[k]);
        }
    }

    #[test]
    fn history_average_is_bounded_by_samples(
        values in prop::collection::vec(-5.0f64..5.0, 2..300),
        a in 0.0f64..1.0,
        span in 1e-4f64..1.0,
    ) {
        let period = 0.01;
        let h = filled_history(period, 5.0, &values);
        let t_end = (values.len() - 1) as f64 * period;
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        let avg = h.average_clamped(a * t_end, a * t_end + span);
        prop_assert!(avg >= lo - 1e-12 && avg <= hi + 1e-12);
    }

    #[test]
    fn history_average_of_affine_record_is_midpoint(
        slope in -3.0f64..3.0,
        offset in -3.0f64..3.0,
        a in 0.0f64..0.5,
        span in 1e-3f64..0.5,
    ) {
        let period = 0.01;
        let values: Vec<f64> = (0..101).map(|k| offset + slope * k as f64 * period).collect();
        let h = filled_history(period, 2.0, &values);
        let avg = h.average_clamped(a, a + span);
        let mid = offset + slope * (a + 0.5 * span);
        prop_assert!((avg - mid).abs() < 1e-12, "{avg} vs {mid}");
    }

    #[test]
    fn linear_predictor_solvers_agree(
        x0 in -2.0f64..2.0,
        delay in 0.1f64..2.0,
        amp in -1.0f64..1.0,
        freq in 0.0f64..6.0,
    ) {
        let sys = LinearScalarSystem::new(1.0, 1.0).unwrap();
        let grid = PredictorGrid::new(401).unwrap();
        let u = |y: f64| amp * (freq * y).sin();
        let uv = grid.sample(u);
        let fp = solve_fixed_point(&sys, &[x0], &uv, delay, grid, FixedPointOptions::default(), None).unwrap();
        let march = solve_ode_march(&sys, &[x0], &u, delay, grid).unwrap();
        let exact = sys.closed_form_predictor(x0, u, delay, 1.0, 400);
        prop_assert!((fp.terminal()[0] - exact).abs() < 1e-3 * (1.0 + exact.abs()));
        prop_assert!((march.terminal()[0] - exact).abs() < 1e-8 * (1.0 + exact.abs()));
        let res = integral_residual(&sys, &[x0], &uv, delay, grid, &fp.values).unwrap();
        prop_assert!(res < 1e-9);
    }

    #[test]
    fn grid_integrates_affine_exactly(n in 2usize..500, a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let grid = PredictorGrid::new(n).unwrap();
        let v = grid.sample(|x| a + b * x);
        prop_assert!((grid.integrate(&v) - (a + 0.5 * b)).abs() < 1e-12);
    }

    #[test]
    fn model_text_round_trips(seed in any::<u64>(), d_c in 1usize..6, layers in 0usize..3, softplus in any::<bool>()) {
        let layout = InputLayout { state_dim: 2, input_points: 5, includes_delay: true };
        let act = if softplus { Activation::Softplus } else { Activation::Tanh };
        let m = NeuralOperatorModel::new(layout, d_c, layers, 7, act, true, seed).unwrap();
        let back = model_from_text(&model_to_text(&m)).unwrap();
        prop_assert_eq!(&back, &m);
        let x = [0.1, 4.0];
        let u = [0.0, 0.2, -0.1, 0.3, 0.05];
        prop_assert_eq!(back.forward(&x, &u, 1.2, &[0.0, 0.5, 1.0]).unwrap(), m.forward(&x, &u, 1.2, &[0.0, 0.5, 1.0]).unwrap());
    }

    #[test]
    fn config_text_round_trips(entries in prop::collection::btree_map("[a-z][a-z_0-9]{0,8}", "[A-Za-z0-9.,_-]{1,12}", 0..10)) {
        let text: String = entries.iter().map(|(k, v)| format!("  {k} =\t{v}  # note\n")).collect();
        let kv = KeyValues::parse(&text).unwrap();
        prop_assert_eq!(kv.keys().count(), entries.len());
        for (k, v) in &entries {
            prop_assert_eq!(kv.get(k), Some(v.as_str()));
        }
    }
}

#[test]
fn linear_predictor_matches_exponential_for_constant_input() {
    let sys = LinearScalarSystem::new(-0.5, 2.0).unwrap();
    let grid = PredictorGrid::new(1001).unwrap();
    let (x0, c, d) = (0.7, 0.3, 1.4);
    let fp = solve_fixed_point(&sys, &[x0], &vec![c; 1001], d, grid, FixedPointOptions::default(), None).unwrap();
    let e = (sys.a * d).exp();
    let exact = e * x0 + sys.b_in * c * (e - 1.0) / sys.a;
    assert!((fp.terminal()[0] - exact).abs() < 1e-6);
    assert_eq!(sys.state_dim(), 1);
}
