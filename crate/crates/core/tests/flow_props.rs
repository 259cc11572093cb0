use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stableflow_core::*;

fn flow_for(seed: u64, dim: usize, n_flow: usize, n_h: usize, bound: f64) -> FlowParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowParams::random_uniform(dim, n_flow, n_h, bound, &mut rng).unwrap()
}

fn central_jacobian(flow: &FlowParams, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut j = DMatrix::zeros(d, d);
    for c in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += h;
        xm[c] -= h;
        let col = (flow_forward(flow, &xp).unwrap() - flow_forward(flow, &xm).unwrap()) / (2.0 * h);
        j.set_column(c, &col);
    }
    j
}

fn state_strategy(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-2.0..2.0f64, dim), prop::collection::vec(-2.0..2.0f64, dim))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn inverse_undoes_forward(
        seed in any::<u64>(),
        dim in 2usize..=6,
        n_flow in 1usize..=3,
        n_h in 1usize..=10,
        x in prop::collection::vec(-3.0..3.0f64, 6),
    ) {
        let flow = flow_for(seed, dim, n_flow, n_h, 0.5);
        let x = DVector::from_column_slice(&x[..dim]);
        let back = flow_inverse(&flow, &flow_forward(&flow, &x).unwrap()).unwrap();
        prop_assert!((back - &x).norm() < 1e-9 * (1.0 + x.norm()));
    }

    #[test]
    fn jacobian_matches_central_differences(
        seed in any::<u64>(),
        dim in 2usize..=6,
        x in prop::collection::vec(-2.0..2.0f64, 6),
    ) {
        let flow = flow_for(seed, dim, 2, 8, 0.5);
        let x = DVector::from_column_slice(&x[..dim]);
        let j = flow_jacobian(&flow, &x).unwrap();
        let fd = central_jacobian(&flow, &x, 1e-5);
        let rel = (&j - &fd).norm() / j.norm().max(1e-12);
        prop_assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn jacobian_is_never_singular(seed in any::<u64>(), dim in 2usize..=6, x in prop::collection::vec(-5.0..5.0f64, 6)) {
        let flow = flow_for(seed, dim, 2, 8, 1.0);
        let j = flow_jacobian(&flow, &DVector::from_column_slice(&x[..dim])).unwrap();
        let det = j.determinant();
        prop_assert!(det > 0.0 && det.is_finite(), "det {det}");
    }

    #[test]
    fn controller_vanishes_only_at_rest_on_goal(seed in any::<u64>(), (x, v) in state_strategy(2)) {
        let flow = flow_for(seed, 2, 2, 8, 0.5);
        let x_ref = vec![0.1, -0.2];
        let policy = PolicyParams::with_sigma(flow, 1.0, x_ref.clone()).unwrap();
        let gains = Gains::identity(2);
        let at_goal = PlantState::at_rest(DVector::from_vec(x_ref));
        prop_assert!(controller_mean(&policy, &gains, &at_goal).unwrap().norm() < 1e-12);
        let state = PlantState::from_slices(&x, &v).unwrap();
        let (_, damper) = controller_terms(&policy, &gains, &state).unwrap();
        prop_assert!(state.xdot.dot(&damper) <= 1e-12);
        let potential = lyapunov_potential(&policy, &gains, &state.x).unwrap();
        prop_assert!(potential >= 0.0);
    }

    #[test]
    fn flat_parameters_round_trip(seed in any::<u64>(), dim in 2usize..=6, n_flow in 1usize..=3, n_h in 1usize..=6) {
        let flow = flow_for(seed, dim, n_flow, n_h, 1.0);
        let flat = flow.to_param_vector();
        prop_assert_eq!(flat.0.len(), flow.num_params());
        prop_assert_eq!(flow.with_params(&flat.0).unwrap(), flow);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn controller_parameter_gradient_matches_central_differences(seed in any::<u64>(), (x, v) in state_strategy(2)) {
        let flow = flow_for(seed, 2, 2, 8, 0.5);
        let gains = Gains::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.8]),
        )
        .unwrap();
        let x = DVector::from_vec(x);
        let v = DVector::from_vec(v);
        let x_ref = DVector::from_vec(vec![0.2, -0.1]);
        let (u, du) = grad_through_flow(&flow, &x, &v, &x_ref, &gains).unwrap();
        let theta = flow.to_param_vector().0;
        let h = 1e-6;
        let eval = |t: &[f64]| {
            let f = flow.with_params(t).unwrap();
            let policy = PolicyParams::with_sigma(f, 1.0, x_ref.iter().copied().collect()).unwrap();
            controller_mean(&policy, &gains, &PlantState::new(x.clone(), v.clone()).unwrap()).unwrap()
        };
        let u0 = eval(&theta);
        prop_assert!((u0 - u).norm() < 1e-12);
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] += h;
            let up = eval(&t);
            t[k] -= 2.0 * h;
            let down = eval(&t);
            let fd = (up - down) / (2.0 * h);
            for r in 0..2 {
                let err = (fd[r] - du[(r, k)]).abs() / fd[r].abs().max(1e-3);
                prop_assert!(err < 1e-4, "param {k} row {r}: fd {} analytic {}", fd[r], du[(r, k)]);
            }
        }
    }
}
