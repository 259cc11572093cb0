//! Manipulator dynamics `M(x)ẍ + C(x, ẋ)ẋ + g(x) = u + f_ext`, integrated
//! with semi-implicit Euler under zero-order-hold control, plus the plants
//! used in the experiments.

mod arm;
mod block;
mod reward;
mod task;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{mean_toward, policy_sample, Gains, PlantState, PolicyParams};
use crate::error::{Error, Result};
use crate::flow::flow_forward;

pub use arm::TwoLinkArmPlant;
pub use block::{block_contact_force, BlockGeometry, BlockInsertionPlant, Contact, ContactParams, Polygon};
pub use reward::{reward_fn, reward_grad_x, RewardConfig};
pub use task::{StartDistribution, Task, TaskKind};

/// A controlled mechanical system in generalized coordinates.
pub trait PlantModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Inertia matrix `M(x)`, symmetric positive definite.
    fn mass_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Coriolis/centrifugal matrix `C(x, ẋ)`.
    fn coriolis(&self, x: &DVector<f64>, xdot: &DVector<f64>) -> DMatrix<f64>;

    fn gravity(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }

    /// Force exerted by the (passive) environment.
    fn external_force(&self, x: &DVector<f64>, _xdot: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }

    /// External force as applied by an integrator with step `h`. Plants with
    /// stiff dissipative terms may limit them so one step cannot reverse the
    /// motion they oppose.
    fn external_force_discrete(&self, x: &DVector<f64>, xdot: &DVector<f64>, _h: f64) -> DVector<f64> {
        self.external_force(x, xdot)
    }

    /// Energy currently stored in the environment (penalty springs).
    fn elastic_energy(&self, _x: &DVector<f64>) -> f64 {
        0.0
    }

    fn is_success(&self, _state: &PlantState) -> bool {
        false
    }

    fn name(&self) -> &'static str;
}

/// Unconstrained point mass `m I` with no environment. The goal is the
/// origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMass {
    pub mass: f64,
    pub dim: usize,
    /// Distance from the origin counted as success (m).
    pub goal_radius: f64,
}

impl PointMass {
    pub fn new(mass: f64, dim: usize) -> Self {
        PointMass {
            mass,
            dim,
            goal_radius: 0.01,
        }
    }
}

impl Default for PointMass {
    fn default() -> Self {
        PointMass::new(1.0, 2)
    }
}

impl PlantModel for PointMass {
    fn dim(&self) -> usize {
        self.dim
    }

    fn mass_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.mass
    }

    fn coriolis(&self, _x: &DVector<f64>, _xdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }

    fn is_success(&self, state: &PlantState) -> bool {
        state.x.norm() < self.goal_radius
    }

    fn name(&self) -> &'static str {
        "free-point"
    }
}

/// Timing of the simulation loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Control period (s); the action is held over it.
    pub dt_control: f64,
    /// Physics substeps per control period.
    pub substeps: usize,
    /// Any `‖x‖` above this aborts the episode (m).
    pub workspace_bound: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_control: 0.01,
            substeps: 10,
            workspace_bound: 10.0,
        }
    }
}

impl SimConfig {
    pub fn dt_physics(&self) -> f64 {
        self.dt_control / self.substeps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_control > 0.0 && self.dt_control.is_finite()) || self.substeps == 0 {
            return Err(Error::Config("dt_control must be positive and substeps nonzero".into()));
        }
        if !(self.workspace_bound > 0.0) {
            return Err(Error::Config("workspace bound must be positive".into()));
        }
        Ok(())
    }

    /// Number of control steps in `horizon`, which must be a whole multiple
    /// of the control period.
    pub fn steps_for(&self, horizon: f64) -> Result<usize> {
        let n = (horizon / self.dt_control).round();
        if n < 0.0 || (n * self.dt_control - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {horizon} s is not a multiple of dt_control {} s",
                self.dt_control
            )));
        }
        Ok(n as usize)
    }
}

/// Result of one control period.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: PlantState,
    /// Mean external force over the substeps (N).
    pub mean_fext: DVector<f64>,
    /// Work done by the external force, each substep's held force against the
    /// trapezoidal mean velocity (J).
    pub ext_work: f64,
}

/// Advances one control period holding `u` constant.
pub fn step<P: PlantModel + ?Sized>(plant: &P, state: &PlantState, u: &DVector<f64>, cfg: &SimConfig) -> Result<PlantState> {
    Ok(step_detailed(plant, state, u, cfg)?.state)
}

pub fn step_detailed<P: PlantModel + ?Sized>(
    plant: &P,
    state: &PlantState,
    u: &DVector<f64>,
    cfg: &SimConfig,
) -> Result<StepOutcome> {
    let d = plant.dim();
    if state.dim() != d || u.len() != d {
        return Err(Error::Shape(format!("{}-d state/{}-d control for a {d}-d plant", state.dim(), u.len())));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("control input".into()));
    }
    let h = cfg.dt_physics();
    let mut x = state.x.clone();
    let mut v = state.xdot.clone();
    let mut f_sum = DVector::zeros(d);
    let mut work = 0.0;
    for _ in 0..cfg.substeps {
        let f = plant.external_force_discrete(&x, &v, h);
        let mass = plant.mass_matrix(&x);
        let chol = mass.cholesky().ok_or_else(|| Error::SingularMass {
            config: x.iter().copied().collect(),
        })?;
        let rhs = u + &f - plant.coriolis(&x, &v) * &v - plant.gravity(&x);
        let acc = chol.solve(&rhs);
        let v_next = &v + acc * h;
        work += 0.5 * h * f.dot(&(&v + &v_next));
        v = v_next;
        x += &v * h;
        f_sum += &f;
    }
    let next = PlantState { x, xdot: v };
    if !next.is_finite() {
        return Err(Error::Divergence {
            time: f64::NAN,
            norm: f64::INFINITY,
        });
    }
    Ok(StepOutcome {
        state: next,
        mean_fext: f_sum / cfg.substeps as f64,
        ext_work: work,
    })
}

/// One episode. States have one more entry than actions and rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PlantState>,
    pub actions: Vec<DVector<f64>>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Mean external force during each control period.
    pub f_ext_trace: Vec<DVector<f64>>,
    /// External work injected during each control period.
    pub ext_work: Vec<f64>,
    pub success: bool,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    t: f64,
    x: &'a [f64],
    xdot: &'a [f64],
    u: Option<&'a [f64]>,
    r: Option<f64>,
    logp: Option<f64>,
    fext: Option<&'a [f64]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn final_state(&self) -> &PlantState {
        self.states.last().expect("trajectory holds at least the start state")
    }

    /// One JSON object per line: `{t, x, xdot, u, r, logp, fext}`. The final
    /// state is written last with null action fields.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (i, (t, s)) in self.times.iter().zip(&self.states).enumerate() {
            let rec = StepRecord {
                t: *t,
                x: s.x.as_slice(),
                xdot: s.xdot.as_slice(),
                u: self.actions.get(i).map(|a| a.as_slice()),
                r: self.rewards.get(i).copied(),
                logp: self.log_probs.get(i).copied(),
                fext: self.f_ext_trace.get(i).map(|f| f.as_slice()),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Closed-loop episode driven by `act`, which returns an action and its log
/// probability for the current state.
pub fn simulate<P, F>(
    plant: &P,
    start: PlantState,
    steps: usize,
    sim: &SimConfig,
    x_ref: &DVector<f64>,
    reward: &RewardConfig,
    mut act: F,
) -> Result<Trajectory>
where
    P: PlantModel + ?Sized,
    F: FnMut(&PlantState) -> Result<(DVector<f64>, f64)>,
{
    sim.validate()?;
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        actions: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        log_probs: Vec::with_capacity(steps),
        f_ext_trace: Vec::with_capacity(steps),
        ext_work: Vec::with_capacity(steps),
        success: plant.is_success(&start),
    };
    traj.times.push(0.0);
    traj.states.push(start);
    for k in 0..steps {
        let state = traj.states.last().unwrap();
        let (u, logp) = act(state)?;
        let r = reward_fn(state, &u, x_ref, reward);
        let time = (k + 1) as f64 * sim.dt_control;
        let out = step_detailed(plant, state, &u, sim).map_err(|e| match e {
            Error::Divergence { norm, .. } => Error::Divergence { time, norm },
            other => other,
        })?;
        let norm = out.state.x.norm();
        if norm > sim.workspace_bound {
            return Err(Error::Divergence { time, norm });
        }
        traj.success |= plant.is_success(&out.state);
        traj.actions.push(u);
        traj.rewards.push(r);
        traj.log_probs.push(logp);
        traj.f_ext_trace.push(out.mean_fext);
        traj.ext_work.push(out.ext_work);
        traj.times.push(time);
        traj.states.push(out.state);
    }
    Ok(traj)
}

/// Episode settings shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Episode length (s).
    pub horizon: f64,
    pub sim: SimConfig,
    pub reward: RewardConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            horizon: 2.0,
            sim: SimConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl RolloutConfig {
    pub fn steps(&self) -> Result<usize> {
        self.sim.steps_for(self.horizon)
    }
}

/// Normalizing-flow policy episode: stochastic actions from `policy_sample`,
/// otherwise the deterministic controller (log probability reported as 0).
pub fn rollout<P: PlantModel + ?Sized, R: Rng + ?Sized>(
    plant: &P,
    policy: &PolicyParams,
    gains: &Gains,
    start: PlantState,
    cfg: &RolloutConfig,
    stochastic: bool,
    rng: &mut R,
) -> Result<Trajectory> {
    let x_ref = policy.x_ref();
    let y_ref = flow_forward(&policy.flow, &x_ref)?;
    let steps = cfg.steps()?;
    simulate(plant, start, steps, &cfg.sim, &x_ref, &cfg.reward, |s| {
        if stochastic {
            policy_sample(policy, gains, s, rng)
        } else {
            Ok((mean_toward(policy, gains, s, &y_ref)?, 0.0))
        }
    })
}
