use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stableflow_core::verify::*;
use stableflow_core::*;

#[test]
fn grid_minimum_sits_at_the_goal_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 41;
    for case in 0..20 {
        let flow = FlowParams::random_uniform(2, 2, 8, 0.6, &mut rng).unwrap();
        let x_ref = vec![rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
        let policy = PolicyParams::with_sigma(flow, 1.0, x_ref.clone()).unwrap();
        let (gi, gj) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (dx, dy) = (rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05));
        let window = Window {
            x_min: x_ref[0] - gi as f64 * dx,
            x_max: x_ref[0] + (n - 1 - gi) as f64 * dx,
            y_min: x_ref[1] - gj as f64 * dy,
            y_max: x_ref[1] + (n - 1 - gj) as f64 * dy,
        };
        let grid = energy_grid(&policy, &Gains::identity(2), &window, n).unwrap();
        assert!(grid.values.iter().flatten().all(|v| *v >= 0.0));
        assert_eq!(grid.nearest(&x_ref), (gi, gj));
        assert_eq!(grid.argmin(), (gi, gj), "case {case}");
        assert!(grid.min_value() < 1e-20);
    }
}

#[test]
fn heavy_damping_still_decreases() {
    let plant = PointMass::new(1.0, 2);
    let cfg = VerifyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let starts: Vec<PlantState> = (0..4)
        .map(|_| {
            PlantState::from_slices(
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            )
            .unwrap()
        })
        .collect();
    let flow = FlowParams::random(2, 2, 8, &mut rng).unwrap();
    let policy = PolicyParams::with_sigma(flow, 1.0, vec![0.0, 0.0]).unwrap();
    let gains = Gains::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 10.0).unwrap();
    let report = verify_lyapunov_decrease(&plant, &policy, &gains, &starts, &cfg, 1).unwrap();
    assert!(report.pass, "{}", report.summary());
}

#[test]
fn passivity_holds_for_identity_flow_in_contact() {
    let plant = BlockInsertionPlant::default();
    let flow = FlowParams::identity(2, 2, 8).unwrap();
    let policy = PolicyParams::with_sigma(flow, 1.0, vec![0.0, 0.0]).unwrap();
    let starts = plant.eval_starts();
    let cfg = VerifyConfig {
        horizon: 2.0,
        ..VerifyConfig::default()
    };
    let report = verify_passivity(&plant, &policy, &Gains::identity(2), &starts, &cfg, 1).unwrap();
    assert!(report.pass, "{}", report.summary());
}

#[test]
fn step_energy_change_is_negative_while_moving() {
    let plant = PointMass::new(1.0, 2);
    let flow = FlowParams::identity(2, 2, 8).unwrap();
    let policy = PolicyParams::with_sigma(flow, 1.0, vec![0.0, 0.0]).unwrap();
    let state = PlantState::new(DVector::from_vec(vec![0.3, 0.1]), DVector::from_vec(vec![0.5, -0.2])).unwrap();
    let sim = VerifyConfig::default().sim;
    let dv = step_energy_change(&plant, &policy, &Gains::identity(2), &state, &sim).unwrap();
    assert!(dv < 0.0, "{dv}");
}
