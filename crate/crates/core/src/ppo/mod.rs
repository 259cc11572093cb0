//! Clipped-surrogate policy-gradient training with generalized advantage
//! estimation, for both the normalizing-flow policy and a dense-network
//! baseline.

mod adam;
mod gae;
mod mlp;
mod policy;
mod trainer;

pub use adam::Adam;
pub use gae::{compute_gae, normalize_advantages};
pub use mlp::{Activations, Mlp};
pub use policy::{BaselinePolicy, Checkpoint, NfPolicy, Policy, PolicyKind, ValueFunction, BASELINE_OUTPUT_SCALE};
pub use trainer::{
    deterministic_episode, episode_rng, itr90, ppo_update, success_auc, surrogate_gradient, surrogate_objective, train,
    IterationMetrics, Optimizers, PpoConfig, Sample, SurrogateEval, TrainConfig, TrainOutcome, UpdateStats,
    VALUE_HIDDEN,
};

/// Hidden layer widths of the baseline policy network.
pub const BASELINE_HIDDEN: [usize; 2] = [32, 32];
