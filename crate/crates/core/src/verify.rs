//! Numerical checks of the closed-loop guarantees: the energy
//! `V = ½Δφᵀ S Δφ + ½ẋᵀMẋ` never grows without external force, trajectories
//! reach the goal, energy grows no faster than external work, plus structural
//! identities of the plant and the flow.

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::controller::{controller_mean, lyapunov_potential, mean_toward, Gains, PlantState, PolicyParams};
use crate::dynamics::{simulate, step, PlantModel, RewardConfig, SimConfig, Trajectory, TwoLinkArmPlant};
use crate::error::{Error, Result};
use crate::flow::{flow_forward, flow_jacobian, FlowParams};
use crate::parallel::par_map;

mod lenient_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Where the worst case of a check occurred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// Index of the start state (or sweep case).
    pub case: usize,
    /// Control step within the trajectory.
    pub step: usize,
    pub time: f64,
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Outcome of one property check. `pass` holds exactly when
/// `worst_violation ≤ tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub property: String,
    pub pass: bool,
    #[serde(with = "lenient_f64")]
    pub worst_violation: f64,
    pub tolerance: f64,
    pub units: String,
    /// Number of trajectories or points examined.
    pub cases: usize,
    pub witness: Option<Witness>,
}

impl VerificationReport {
    pub fn new(property: &str, units: &str, worst_violation: f64, tolerance: f64, cases: usize, witness: Option<Witness>) -> Self {
        VerificationReport {
            property: property.to_string(),
            pass: worst_violation <= tolerance,
            worst_violation,
            tolerance,
            units: units.to_string(),
            cases,
            witness,
        }
    }

    /// Combines reports of one property, keeping the worst witness.
    pub fn merge(reports: Vec<VerificationReport>) -> Result<VerificationReport> {
        let mut iter = reports.into_iter();
        let mut acc = iter.next().ok_or_else(|| Error::Shape("no reports to merge".into()))?;
        for r in iter {
            if r.property != acc.property {
                return Err(Error::Shape(format!("cannot merge {} into {}", r.property, acc.property)));
            }
            acc.cases += r.cases;
            if !(r.worst_violation <= acc.worst_violation) {
                acc.worst_violation = r.worst_violation;
                acc.witness = r.witness;
            }
        }
        acc.pass = acc.worst_violation <= acc.tolerance;
        Ok(acc)
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {}: worst {:.3e} {} (tolerance {:.1e}, {} cases)",
            if self.pass { "PASS" } else { "FAIL" },
            self.property,
            self.worst_violation,
            self.units,
            self.tolerance,
            self.cases
        )
    }
}

/// Simulation settings and tolerances of the verifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub sim: SimConfig,
    /// Allowed energy growth per control step from time discretization (J).
    pub eps_int: f64,
    /// Horizon of the decrease and passivity checks (s).
    pub horizon: f64,
    /// Horizon of the convergence check (s).
    pub long_horizon: f64,
    pub delta_pos: f64,
    pub delta_vel: f64,
    /// Bound on `|ẋᵀ(Ṁ − 2C)ẋ| / (1 + ‖ẋ‖²)`.
    pub skew_tol: f64,
    /// Lower bound on the smallest singular value of the flow Jacobian.
    pub min_singular: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            sim: SimConfig {
                dt_control: 1e-3,
                substeps: 10,
                workspace_bound: 10.0,
            },
            eps_int: 1e-6,
            horizon: 5.0,
            long_horizon: 30.0,
            delta_pos: 1e-3,
            delta_vel: 1e-3,
            skew_tol: 1e-6,
            min_singular: 1e-8,
        }
    }
}

/// Closed-loop energy evaluator with the goal image cached.
struct Energy<'a> {
    policy: &'a PolicyParams,
    gains: &'a Gains,
    y_ref: DVector<f64>,
}

impl<'a> Energy<'a> {
    fn new(policy: &'a PolicyParams, gains: &'a Gains) -> Result<Self> {
        policy.validate()?;
        gains.check_dim(policy.dim())?;
        let y_ref = flow_forward(&policy.flow, &policy.x_ref())?;
        Ok(Energy { policy, gains, y_ref })
    }

    fn total<P: PlantModel + ?Sized>(&self, plant: &P, s: &PlantState) -> Result<f64> {
        let dy = flow_forward(&self.policy.flow, &s.x)? - &self.y_ref;
        let kinetic = 0.5 * s.xdot.dot(&(plant.mass_matrix(&s.x) * &s.xdot));
        Ok(0.5 * dy.dot(&(&self.gains.stiffness * &dy)) + kinetic)
    }
}

/// Deterministic closed-loop rollout over `horizon` seconds.
pub fn deterministic_rollout<P: PlantModel + ?Sized>(
    plant: &P,
    policy: &PolicyParams,
    gains: &Gains,
    start: &PlantState,
    horizon: f64,
    sim: &SimConfig,
) -> Result<Trajectory> {
    let steps = sim.steps_for(horizon)?;
    let x_ref = policy.x_ref();
    let y_ref = flow_forward(&policy.flow, &x_ref)?;
    simulate(plant, start.clone(), steps, sim, &x_ref, &RewardConfig::default(), |s| {
        Ok((mean_toward(policy, gains, s, &y_ref)?, 0.0))
    })
}

fn witness(case: usize, step: usize, traj: &Trajectory, note: Option<String>) -> Witness {
    let s = &traj.states[step];
    Witness {
        case,
        step,
        time: traj.times[step],
        x: s.x.iter().copied().collect(),
        xdot: s.xdot.iter().copied().collect(),
        note,
    }
}

fn divergence_witness(case: usize, start: &PlantState, err: &Error) -> Witness {
    Witness {
        case,
        step: 0,
        time: match err {
            Error::Divergence { time, .. } => *time,
            _ => f64::NAN,
        },
        x: start.x.iter().copied().collect(),
        xdot: start.xdot.iter().copied().collect(),
        note: Some(format!("rollout failed: {err}")),
    }
}

fn is_rollout_failure(err: &Error) -> bool {
    matches!(
        err,
        Error::Divergence { .. } | Error::NonFinite(_) | Error::NonFiniteLayer { .. } | Error::SingularMass { .. }
    )
}

/// Per-start `(worst value, witness)`; rollout failures become an infinite
/// violation witnessed at the start state.
fn per_start<P, F>(
    plant: &P,
    policy: &PolicyParams,
    gains: &Gains,
    starts: &[PlantState],
    horizon: f64,
    sim: &SimConfig,
    jobs: usize,
    check: F,
) -> Result<(f64, Option<Witness>)>
where
    P: PlantModel + ?Sized,
    F: Fn(usize, &Trajectory) -> Result<(f64, Option<Witness>)> + Sync,
{
    let results = par_map(jobs, starts.len(), |i| match deterministic_rollout(plant, policy, gains, &starts[i], horizon, sim) {
        Ok(traj) => check(i, &traj),
        Err(err) if is_rollout_failure(&err) => Ok((f64::INFINITY, Some(divergence_witness(i, &starts[i], &err)))),
        Err(err) => Err(err),
    });
    let mut worst = f64::NEG_INFINITY;
    let mut wit = None;
    for r in results {
        let (v, w) = r?;
        if !(v <= worst) {
            worst = v;
            wit = w;
        }
    }
    Ok((worst, wit))
}

fn require_free<P: PlantModel + ?Sized>(plant: &P, traj: &Trajectory) -> Result<()> {
    if traj.f_ext_trace.iter().any(|f| f.iter().any(|v| *v != 0.0)) {
        return Err(Error::Config(format!(
            "plant `{}` exerts external force; use the passivity check",
            plant.name()
        )));
    }
    Ok(())
}

/// Largest one-step growth `V(t_{k+1}) − V(t_k)` of the energy along
/// deterministic rollouts of a plant without external force.
pub fn verify_lyapunov_decrease<P: PlantModel + ?Sized>(
    plant: &P,
    policy: &PolicyParams,
    gains: &Gains,
    starts: &[PlantState],
    cfg: &VerifyConfig,
    jobs: usize,
) -> Result<VerificationReport> {
    let energy = Energy::new(policy, gains)?;
    let (worst, wit) = per_start(plant, policy, gains, starts, cfg.horizon, &cfg.sim, jobs, |case, traj| {
        require_free(plant, traj)?;
        let mut prev = energy.total(plant, &traj.states[0])?;
        let mut worst = f64::NEG_INFINITY;
        let mut at = 0;
        for (k, s) in traj.states.iter().enumerate().skip(1) {
            let v = energy.total(plant, s)?;
            if v - prev > worst {
                worst = v - prev;
                at = k;
            }
            prev = v;
        }
        Ok((worst.max(0.0), Some(witness(case, at, traj, None))))
    })?;
    Ok(VerificationReport::new("lyapunov_decrease", "J", worst, cfg.eps_int, starts.len(), wit))
}

/// Distance from rest at the goal after the long horizon, with the velocity
/// error scaled by `delta_pos / delta_vel` so one tolerance covers both.
pub fn verify_convergence<P: PlantModel + ?Sized>(
    plant: &P,
    policy: &PolicyParams,
    gains: &Gains,
    starts: &[PlantState],
    cfg: &VerifyConfig,
    jobs: usize,
) -> Result<VerificationReport> {
    let x_ref = policy.x_ref();
    let (worst, wit) = per_start(plant, policy, gains, starts, cfg.long_horizon, &cfg.sim, jobs, |case, traj| {
        require_free(plant, traj)?;
        let end = traj.final_state();
        let err = (&end.x - &x_ref).norm().max(end.xdot.norm() * cfg.delta_pos / cfg.delta_vel);
        Ok((err, Some(witness(case, traj.states.len() - 1, traj, None))))
    })?;
    Ok(VerificationReport::new("convergence", "m", worst, cfg.delta_pos, starts.len(), wit))
}

/// Largest `V(t) − V(0) − W_ext(t) − k·eps_int` over every prefix of each
/// rollout, where `W_ext` is the work done on the plant by its environment.
pub fn verify_passivity<P: PlantModel + ?Sized>(
    plant: &P,
    policy: &PolicyParams,
    gains: &Gains,
    starts: &[PlantState],
    cfg: &VerifyConfig,
    jobs: usize,
) -> Result<VerificationReport> {
    let energy = Energy::new(policy, gains)?;
    let (worst, wit) = per_start(plant, policy, gains, starts, cfg.horizon, &cfg.sim, jobs, |case, traj| {
        let v0 = energy.total(plant, &traj.states[0])?;
        let mut work = 0.0;
        let mut worst = f64::NEG_INFINITY;
        let mut at = 0;
        for (k, s) in traj.states.iter().enumerate().skip(1) {
            work += traj.ext_work[k - 1];
            let excess = energy.total(plant, s)? - v0 - work - k as f64 * cfg.eps_int;
            if excess > worst {
                worst = excess;
                at = k;
            }
        }
        Ok((worst.max(0.0), Some(witness(case, at, traj, None))))
    })?;
    Ok(VerificationReport::new("passivity", "J", worst, 0.0, starts.len(), wit))
}

/// `max_k |ẋᵀ(Ṁ − 2C)ẋ| / (1 + ‖ẋ‖²)` along an arm trajectory, with `Ṁ` from
/// central differences of `M` over neighbouring samples and `ẋ` the chord
/// velocity `(x_{k+1} − x_{k−1}) / (t_{k+1} − t_{k−1})` those samples define.
pub fn verify_structure(plant: &TwoLinkArmPlant, traj: &Trajectory, cfg: &VerifyConfig) -> VerificationReport {
    let n = traj.states.len();
    let mut worst = 0.0;
    let mut wit = None;
    for k in 1..n.saturating_sub(1) {
        let (prev, next) = (&traj.states[k - 1].x, &traj.states[k + 1].x);
        let dt = traj.times[k + 1] - traj.times[k - 1];
        let v = (next - prev) / dt;
        let mdot = (plant.mass_matrix(next) - plant.mass_matrix(prev)) / dt;
        let n_mat = mdot - plant.coriolis(&traj.states[k].x, &v) * 2.0;
        let q = v.dot(&(n_mat * &v)).abs() / (1.0 + v.norm_squared());
        if q > worst {
            worst = q;
            wit = Some(witness(0, k, traj, None));
        }
    }
    VerificationReport::new("skew_symmetry", "normalized", worst, cfg.skew_tol, 1, wit)
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Window {
    pub fn centered(center: &[f64], half: f64) -> Self {
        Window {
            x_min: center[0] - half,
            x_max: center[0] + half,
            y_min: center[1] - half,
            y_max: center[1] + half,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::Config("window bounds must satisfy min < max".into()));
        }
        Ok(())
    }

    fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

/// Smallest singular value of the flow Jacobian over a `resolution²` grid.
pub fn verify_jacobian_rank(flow: &FlowParams, window: &Window, resolution: usize, cfg: &VerifyConfig) -> Result<VerificationReport> {
    if flow.dim != 2 {
        return Err(Error::UnsupportedDimension(flow.dim));
    }
    window.validate()?;
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be at least 2".into()));
    }
    let xs = Window::lattice(window.x_min, window.x_max, resolution);
    let ys = Window::lattice(window.y_min, window.y_max, resolution);
    let mut smallest = f64::INFINITY;
    let mut at = [0.0, 0.0];
    for &y in &ys {
        for &x in &xs {
            let j = flow_jacobian(flow, &DVector::from_vec(vec![x, y]))?;
            let sv = j.singular_values().min();
            if sv < smallest {
                smallest = sv;
                at = [x, y];
            }
        }
    }
    let wit = Witness {
        case: 0,
        step: 0,
        time: 0.0,
        x: at.to_vec(),
        xdot: vec![0.0, 0.0],
        note: Some(format!("smallest singular value {smallest:.6e}")),
    };
    // Violation is positive when the smallest singular value falls below the bound.
    Ok(VerificationReport::new(
        "jacobian_full_rank",
        "singular value deficit",
        cfg.min_singular - smallest,
        0.0,
        resolution * resolution,
        Some(wit),
    ))
}

/// Energy change over one control step from `state` with zero external force.
pub fn step_energy_change<P: PlantModel + ?Sized>(
    plant: &P,
    policy: &PolicyParams,
    gains: &Gains,
    state: &PlantState,
    sim: &SimConfig,
) -> Result<f64> {
    let energy = Energy::new(policy, gains)?;
    let u = controller_mean(policy, gains, state)?;
    let next = step(plant, state, &u, sim)?;
    Ok(energy.total(plant, &next)? - energy.total(plant, state)?)
}

/// Zero-velocity energy `V|ẋ=0` sampled on a lattice; `values[j][i]` is
/// taken at `(xs[i], ys[j])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

pub fn energy_grid(policy: &PolicyParams, gains: &Gains, window: &Window, resolution: usize) -> Result<EnergyGrid> {
    if policy.dim() != 2 {
        return Err(Error::UnsupportedDimension(policy.dim()));
    }
    window.validate()?;
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be at least 2".into()));
    }
    let xs = Window::lattice(window.x_min, window.x_max, resolution);
    let ys = Window::lattice(window.y_min, window.y_max, resolution);
    let values = ys
        .iter()
        .map(|&y| {
            xs.iter()
                .map(|&x| lyapunov_potential(policy, gains, &DVector::from_vec(vec![x, y])))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnergyGrid { xs, ys, values })
}

impl EnergyGrid {
    /// `(i, j)` of the smallest value.
    pub fn argmin(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut lo = f64::INFINITY;
        for (j, row) in self.values.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                if *v < lo {
                    lo = *v;
                    best = (i, j);
                }
            }
        }
        best
    }

    /// Lattice indices of the sample nearest to `p`.
    pub fn nearest(&self, p: &[f64]) -> (usize, usize) {
        let idx = |axis: &[f64], v: f64| {
            let step = (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64;
            (((v - axis[0]) / step).round().max(0.0) as usize).min(axis.len() - 1)
        };
        (idx(&self.xs, p[0]), idx(&self.ys, p[1]))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    /// Header row `y\x,x_0,x_1,…`, then one row per `y` led by its coordinate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("y\\x");
        for x in &self.xs {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
        for (y, row) in self.ys.iter().zip(&self.values) {
            out.push_str(&y.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PointMass;

    fn identity_policy() -> PolicyParams {
        PolicyParams::with_sigma(FlowParams::identity(2, 2, 8).unwrap(), 1.0, vec![0.0, 0.0]).unwrap()
    }

    fn short() -> VerifyConfig {
        VerifyConfig {
            horizon: 1.0,
            long_horizon: 30.0,
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn rest_at_goal_has_zero_energy_change() {
        let start = PlantState::at_rest(DVector::zeros(2));
        let r = verify_lyapunov_decrease(&PointMass::default(), &identity_policy(), &Gains::identity(2), &[start], &short(), 1).unwrap();
        assert!(r.pass);
        assert_eq!(r.worst_violation, 0.0);
    }

    #[test]
    fn identity_flow_decrease_is_tight() {
        let start = PlantState::from_slices(&[1.0, -0.5], &[0.3, 0.8]).unwrap();
        let r = verify_lyapunov_decrease(&PointMass::default(), &identity_policy(), &Gains::identity(2), &[start], &short(), 1).unwrap();
        assert!(r.pass, "{}", r.summary());
        assert!(r.worst_violation < 1e-8, "{}", r.summary());
    }

    #[test]
    fn identity_flow_converges() {
        let start = PlantState::at_rest(DVector::from_vec(vec![1.0, 0.0]));
        let r = verify_convergence(&PointMass::default(), &identity_policy(), &Gains::identity(2), &[start], &short(), 1).unwrap();
        assert!(r.pass, "{}", r.summary());
    }

    #[test]
    fn negative_stiffness_breaks_decrease() {
        // Bypasses the positive-definiteness check on purpose.
        let gains = Gains {
            stiffness: -nalgebra::DMatrix::identity(2, 2),
            damping: nalgebra::DMatrix::identity(2, 2) * 0.1,
        };
        let start = PlantState::at_rest(DVector::from_vec(vec![0.1, 0.0]));
        let cfg = VerifyConfig {
            horizon: 1.0,
            ..VerifyConfig::default()
        };
        let r = verify_convergence(&PointMass::default(), &identity_policy(), &gains, &[start], &cfg, 1).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn report_round_trips_infinite_violation() {
        let r = VerificationReport::new("convergence", "m", f64::INFINITY, 1e-3, 1, None);
        let text = serde_json::to_string(&r).unwrap();
        let back: VerificationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert!(!back.pass);
    }

    #[test]
    fn merge_keeps_worst() {
        let a = VerificationReport::new("p", "J", 1e-9, 1e-6, 3, None);
        let b = VerificationReport::new("p", "J", 2e-6, 1e-6, 2, None);
        let m = VerificationReport::merge(vec![a, b]).unwrap();
        assert_eq!(m.cases, 5);
        assert_eq!(m.worst_violation, 2e-6);
        assert!(!m.pass);
    }

    #[test]
    fn identity_grid_is_half_squared_distance() {
        let w = Window::centered(&[0.0, 0.0], 1.0);
        let g = energy_grid(&identity_policy(), &Gains::identity(2), &w, 11).unwrap();
        for (j, y) in g.ys.iter().enumerate() {
            for (i, x) in g.xs.iter().enumerate() {
                assert!((g.values[j][i] - 0.5 * (x * x + y * y)).abs() < 1e-15);
            }
        }
        assert_eq!(g.argmin(), (5, 5));
        assert_eq!(g.nearest(&[0.0, 0.0]), (5, 5));
        let csv = g.to_csv();
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.starts_with("y\\x,-1,-0.8"));
    }

    #[test]
    fn grid_rejects_three_dimensions() {
        let p = PolicyParams::with_sigma(FlowParams::identity(3, 1, 4).unwrap(), 1.0, vec![0.0; 3]).unwrap();
        let err = energy_grid(&p, &Gains::identity(3), &Window::centered(&[0.0, 0.0], 1.0), 5).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDimension(3)));
    }

    #[test]
    fn identity_jacobian_has_unit_singular_values() {
        let flow = FlowParams::identity(2, 2, 8).unwrap();
        let r = verify_jacobian_rank(&flow, &Window::centered(&[0.0, 0.0], 2.0), 5, &VerifyConfig::default()).unwrap();
        assert!(r.pass);
        assert!((r.worst_violation - (1e-8 - 1.0)).abs() < 1e-12);
    }
}
