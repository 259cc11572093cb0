//! Stable normalizing-flow controllers for reinforcement learning.
//!
//! A bijection `φ` built from affine coupling layers reshapes a spring-damper
//! law into a nonlinear controller that keeps a Lyapunov function, so the
//! deterministic policy is globally asymptotically stable and passive for any
//! weights. This crate provides the flow, a nested autodiff engine for its
//! parameter gradients, manipulator and block-insertion simulators, a
//! clipped-surrogate policy-gradient trainer, and numerical verifiers for the
//! stability and passivity properties.

pub mod autodiff;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod parallel;
pub mod ppo;
pub mod verify;

pub use controller::{
    controller_mean, controller_terms, lyapunov_potential, lyapunov_total, policy_log_prob, policy_log_prob_grad,
    policy_sample, Gains, PlantState, PolicyParams,
};
pub use dynamics::{
    rollout, simulate, step, BlockInsertionPlant, PlantModel, PointMass, RewardConfig, RolloutConfig, SimConfig,
    Task, TaskKind, Trajectory, TwoLinkArmPlant,
};
pub use error::{Error, Result};
pub use flow::{flow_forward, flow_inverse, flow_jacobian, grad_through_flow, FlowParams, ParamVector};
