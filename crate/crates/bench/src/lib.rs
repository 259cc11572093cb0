//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stableflow_core::{FlowParams, Gains, PlantState, PolicyParams};

/// A randomly initialized 2-d controller and a moving state away from its goal.
pub struct Fixture {
    pub policy: PolicyParams,
    pub gains: Gains,
    pub state: PlantState,
}

impl Fixture {
    pub fn new(n_flow: usize, n_h: usize, seed: u64) -> Self {
        let flow = FlowParams::random(2, n_flow, n_h, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid flow shape");
        Fixture {
            policy: PolicyParams::with_sigma(flow, 1.0, vec![0.0, 0.0]).expect("valid policy"),
            gains: Gains::identity(2),
            state: PlantState::from_slices(&[0.3, -0.2], &[0.4, 0.1]).expect("2-d state"),
        }
    }
}
