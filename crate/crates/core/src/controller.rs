//! The normalizing-flow control law, its energy function, and the
//! additive-Gaussian policy built on top of it.
//!
//! With `J = ∂φ/∂x` the deterministic controller is
//!
//! ```text
//! u = −Jᵀ S (φ(x) − φ(x_ref)) − Jᵀ D J ẋ
//! ```
//!
//! i.e. a spring-damper acting on `y = φ(x)` pulled back through the
//! bijection. Its energy function is
//! `V = ½ (φ(x) − φ(x_ref))ᵀ S (φ(x) − φ(x_ref)) + ½ ẋᵀ M(x) ẋ`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::flow::{flow_forward, flow_forward_with_jacobian, grad_through_flow, FlowParams};

/// Lower bound applied to trainable log standard deviations: `ln(1e-3)`.
pub const LOG_STD_FLOOR: f64 = -6.907_755_278_982_137;

const SYMMETRY_TOL: f64 = 1e-9;

/// Stiffness `S` and damping `D`, both symmetric positive definite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GainsRepr", into = "GainsRepr")]
pub struct Gains {
    pub stiffness: DMatrix<f64>,
    pub damping: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GainsRepr {
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
}

fn rows_to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("{name} must be square")));
    }
    Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

impl TryFrom<GainsRepr> for Gains {
    type Error = Error;
    fn try_from(repr: GainsRepr) -> Result<Self> {
        Gains::new(rows_to_matrix(&repr.s, "S")?, rows_to_matrix(&repr.d, "D")?)
    }
}

impl From<Gains> for GainsRepr {
    fn from(g: Gains) -> Self {
        GainsRepr {
            s: matrix_to_rows(&g.stiffness),
            d: matrix_to_rows(&g.damping),
        }
    }
}

/// Fails unless `m` is square, symmetric and has a strictly positive smallest
/// eigenvalue.
pub fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{name} is {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} has non-finite entries")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::NotPositiveDefinite(format!("{name} is not symmetric")));
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "{name} has smallest eigenvalue {min_eig:.3e}"
        )));
    }
    Ok(())
}

impl Gains {
    pub fn new(stiffness: DMatrix<f64>, damping: DMatrix<f64>) -> Result<Self> {
        check_spd(&stiffness, "S")?;
        check_spd(&damping, "D")?;
        if stiffness.shape() != damping.shape() {
            return Err(Error::Shape("S and D differ in size".into()));
        }
        Ok(Gains { stiffness, damping })
    }

    /// `S = s·I`, `D = d·I`.
    pub fn scaled_identity(dim: usize, s: f64, d: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * s, DMatrix::identity(dim, dim) * d)
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0, 1.0).expect("identity gains are positive definite")
    }

    pub fn dim(&self) -> usize {
        self.stiffness.nrows()
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::Shape(format!("{}-d gains for a {dim}-d state", self.dim())));
        }
        Ok(())
    }
}

/// Generalized position and velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub xdot: DVector<f64>,
}

impl PlantState {
    pub fn new(x: DVector<f64>, xdot: DVector<f64>) -> Result<Self> {
        if x.len() != xdot.len() {
            return Err(Error::Shape("position and velocity lengths differ".into()));
        }
        let state = PlantState { x, xdot };
        if !state.is_finite() {
            return Err(Error::NonFinite("plant state".into()));
        }
        Ok(state)
    }

    pub fn at_rest(x: DVector<f64>) -> Self {
        let n = x.len();
        PlantState {
            x,
            xdot: DVector::zeros(n),
        }
    }

    pub fn from_slices(x: &[f64], xdot: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(x), DVector::from_column_slice(xdot))
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.xdot.iter()).all(|v| v.is_finite())
    }
}

/// Trainable policy: flow weights plus per-dimension log standard deviation.
/// `x_ref` is the fixed goal and is never trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub flow: FlowParams,
    pub log_std: Vec<f64>,
    pub x_ref: Vec<f64>,
}

impl PolicyParams {
    pub fn new(flow: FlowParams, log_std: Vec<f64>, x_ref: Vec<f64>) -> Result<Self> {
        let p = PolicyParams { flow, log_std, x_ref };
        p.validate()?;
        Ok(p)
    }

    /// Spherical initial noise `sigma_init` in every dimension.
    pub fn with_sigma(flow: FlowParams, sigma_init: f64, x_ref: Vec<f64>) -> Result<Self> {
        if !(sigma_init > 0.0) {
            return Err(Error::Config(format!("sigma_init must be positive, got {sigma_init}")));
        }
        let d = flow.dim;
        Self::new(flow, vec![sigma_init.ln(); d], x_ref)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        let d = self.flow.dim;
        if self.log_std.len() != d || self.x_ref.len() != d {
            return Err(Error::Shape(format!(
                "log_std/x_ref lengths {}/{} for a {d}-d flow",
                self.log_std.len(),
                self.x_ref.len()
            )));
        }
        if self.log_std.iter().chain(self.x_ref.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log_std or x_ref".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.flow.dim
    }

    pub fn x_ref(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x_ref)
    }

    pub fn std(&self) -> DVector<f64> {
        DVector::from_iterator(self.log_std.len(), self.log_std.iter().map(|l| l.exp()))
    }

    /// Number of trainable scalars: flow weights followed by `log_std`.
    pub fn num_trainable(&self) -> usize {
        self.flow.num_params() + self.log_std.len()
    }

    pub fn trainable(&self) -> Vec<f64> {
        let mut v = self.flow.to_param_vector().0;
        v.extend_from_slice(&self.log_std);
        v
    }

    /// Replaces trainable values (flow ⊕ log_std), flooring `log_std`.
    pub fn set_trainable(&mut self, values: &[f64]) -> Result<()> {
        let p = self.flow.num_params();
        if values.len() != p + self.log_std.len() {
            return Err(Error::Shape(format!(
                "expected {} trainable values, got {}",
                p + self.log_std.len(),
                values.len()
            )));
        }
        self.flow = self.flow.with_params(&values[..p])?;
        for (l, v) in self.log_std.iter_mut().zip(&values[p..]) {
            *l = v.max(LOG_STD_FLOOR);
        }
        Ok(())
    }
}

/// `−Jᵀ (S Δφ + D J ẋ)` over any scalar type. `jac[r][c] = ∂φ_r/∂x_c`.
pub(crate) fn control_law<T: Scalar>(
    jac: &[Vec<T>],
    dphi: &[T],
    xdot: &[T],
    stiffness: &DMatrix<f64>,
    damping: &DMatrix<f64>,
) -> Vec<T> {
    let d = dphi.len();
    let zero = T::from_f64(0.0);
    let vel_y: Vec<T> = (0..d)
        .map(|r| (0..d).fold(zero, |acc, c| acc + jac[r][c] * xdot[c]))
        .collect();
    let force_y: Vec<T> = (0..d)
        .map(|r| {
            (0..d).fold(zero, |acc, c| {
                acc + dphi[c].scale(stiffness[(r, c)]) + vel_y[c].scale(damping[(r, c)])
            })
        })
        .collect();
    (0..d)
        .map(|c| -(0..d).fold(zero, |acc, r| acc + jac[r][c] * force_y[r]))
        .collect()
}

fn check_state(policy: &PolicyParams, gains: &Gains, state: &PlantState) -> Result<()> {
    let d = policy.dim();
    gains.check_dim(d)?;
    if state.dim() != d || state.xdot.len() != d {
        return Err(Error::Shape(format!("{}-d state for a {d}-d policy", state.dim())));
    }
    Ok(())
}

/// Position (spring) and velocity (damper) contributions to the control.
pub fn controller_terms(
    policy: &PolicyParams,
    gains: &Gains,
    state: &PlantState,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let y_ref = flow_forward(&policy.flow, &policy.x_ref())?;
    terms_toward(policy, gains, state, &y_ref)
}

fn terms_toward(
    policy: &PolicyParams,
    gains: &Gains,
    state: &PlantState,
    y_ref: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_state(policy, gains, state)?;
    let (y, jac) = flow_forward_with_jacobian(&policy.flow, &state.x)?;
    let jt = jac.transpose();
    let spring = -(&jt * (&gains.stiffness * (y - y_ref)));
    let damper = -(&jt * (&gains.damping * (&jac * &state.xdot)));
    Ok((spring, damper))
}

/// Deterministic normalizing-flow control.
pub fn controller_mean(policy: &PolicyParams, gains: &Gains, state: &PlantState) -> Result<DVector<f64>> {
    let y_ref = flow_forward(&policy.flow, &policy.x_ref())?;
    mean_toward(policy, gains, state, &y_ref)
}

/// `controller_mean` with the goal image `φ(x_ref)` supplied by the caller.
pub(crate) fn mean_toward(
    policy: &PolicyParams,
    gains: &Gains,
    state: &PlantState,
    y_ref: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (spring, damper) = terms_toward(policy, gains, state, y_ref)?;
    let u = spring + damper;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("controller output".into()));
    }
    Ok(u)
}

/// `½ Δφᵀ S Δφ`, the energy at zero velocity.
pub fn lyapunov_potential(policy: &PolicyParams, gains: &Gains, x: &DVector<f64>) -> Result<f64> {
    gains.check_dim(policy.dim())?;
    let y = flow_forward(&policy.flow, x)?;
    let y_ref = flow_forward(&policy.flow, &policy.x_ref())?;
    let dy = y - y_ref;
    Ok(0.5 * dy.dot(&(&gains.stiffness * &dy)))
}

/// Potential plus kinetic energy `½ ẋᵀ M ẋ`.
pub fn lyapunov_total(
    policy: &PolicyParams,
    gains: &Gains,
    state: &PlantState,
    mass: &DMatrix<f64>,
) -> Result<f64> {
    check_state(policy, gains, state)?;
    if mass.shape() != (state.dim(), state.dim()) {
        return Err(Error::Shape("mass matrix size".into()));
    }
    let potential = lyapunov_potential(policy, gains, &state.x)?;
    Ok(potential + 0.5 * state.xdot.dot(&(mass * &state.xdot)))
}

/// Diagonal-Gaussian log density of `action` around `mean`.
pub fn gaussian_log_prob(mean: &DVector<f64>, log_std: &[f64], action: &DVector<f64>) -> f64 {
    let d = mean.len();
    let mut lp = -0.5 * d as f64 * (2.0 * PI).ln();
    for i in 0..d {
        let z = (action[i] - mean[i]) / log_std[i].exp();
        lp -= 0.5 * z * z + log_std[i];
    }
    lp
}

/// Draws `controller_mean + diag(σ) z` and returns it with its log density.
pub fn policy_sample<R: Rng + ?Sized>(
    policy: &PolicyParams,
    gains: &Gains,
    state: &PlantState,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let mean = controller_mean(policy, gains, state)?;
    let std = policy.std();
    let noise = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let action = &mean + std.component_mul(&noise);
    let lp = gaussian_log_prob(&mean, &policy.log_std, &action);
    Ok((action, lp))
}

pub fn policy_log_prob(
    policy: &PolicyParams,
    gains: &Gains,
    state: &PlantState,
    action: &DVector<f64>,
) -> Result<f64> {
    let mean = controller_mean(policy, gains, state)?;
    Ok(gaussian_log_prob(&mean, &policy.log_std, action))
}

/// Log density and its gradient over `flow params ⊕ log_std`.
pub fn policy_log_prob_grad(
    policy: &PolicyParams,
    gains: &Gains,
    state: &PlantState,
    action: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    check_state(policy, gains, state)?;
    if action.len() != policy.dim() {
        return Err(Error::Shape("action length".into()));
    }
    let (mean, du) = grad_through_flow(&policy.flow, &state.x, &state.xdot, &policy.x_ref(), gains)?;
    let d = policy.dim();
    let p = du.ncols();
    let mut grad = vec![0.0; p + d];
    for r in 0..d {
        let var = (2.0 * policy.log_std[r]).exp();
        let resid = action[r] - mean[r];
        let w = resid / var;
        if w != 0.0 {
            for (g, dv) in grad[..p].iter_mut().zip(du.row(r).iter()) {
                *g += w * dv;
            }
        }
        grad[p + r] = resid * resid / var - 1.0;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("log-probability gradient".into()));
    }
    Ok((gaussian_log_prob(&mean, &policy.log_std, action), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn identity_policy() -> PolicyParams {
        PolicyParams::with_sigma(FlowParams::identity(2, 2, 8).unwrap(), 1.0, vec![0.0, 0.0]).unwrap()
    }

    fn random_policy(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow = FlowParams::random_uniform(2, 2, 8, 0.5, &mut rng).unwrap();
        PolicyParams::with_sigma(flow, 0.7, vec![0.2, -0.1]).unwrap()
    }

    #[test]
    fn identity_flow_is_spring_damper() {
        let p = identity_policy();
        let s = PlantState::from_slices(&[1.0, 0.0], &[0.0, 2.0]).unwrap();
        let u = controller_mean(&p, &Gains::identity(2), &s).unwrap();
        assert!((u - v(&[-1.0, -2.0])).amax() < 1e-12);
    }

    #[test]
    fn zero_at_equilibrium() {
        let p = random_policy(3);
        let s = PlantState::at_rest(p.x_ref());
        let u = controller_mean(&p, &Gains::identity(2), &s).unwrap();
        assert_eq!(u, DVector::zeros(2));
        assert_eq!(lyapunov_potential(&p, &Gains::identity(2), &p.x_ref()).unwrap(), 0.0);
    }

    #[test]
    fn potential_closed_form() {
        let p = identity_policy();
        let val = lyapunov_potential(&p, &Gains::identity(2), &v(&[3.0, 4.0])).unwrap();
        assert!((val - 12.5).abs() < 1e-12);
        let s = PlantState::from_slices(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        let total = lyapunov_total(&p, &Gains::identity(2), &s, &DMatrix::identity(2, 2)).unwrap();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gains_reject_indefinite() {
        let bad = Gains::new(DMatrix::identity(2, 2), -DMatrix::identity(2, 2));
        assert!(matches!(bad, Err(Error::NotPositiveDefinite(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(Gains::new(asym, DMatrix::identity(2, 2)).is_err());
        let json = r#"{"S": [[1,0],[0,1]], "D": [[-1,0],[0,-1]]}"#;
        assert!(serde_json::from_str::<Gains>(json).is_err());
    }

    #[test]
    fn gains_json_round_trip() {
        let g = Gains::scaled_identity(2, 2.0, 0.5).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<Gains>(&text).unwrap(), g);
    }

    #[test]
    fn vanishing_noise_returns_mean() {
        let mut p = random_policy(4);
        p.log_std = vec![-20.0, -20.0];
        let g = Gains::identity(2);
        let s = PlantState::from_slices(&[0.4, -0.3], &[0.1, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = policy_sample(&p, &g, &s, &mut rng).unwrap();
        let mean = controller_mean(&p, &g, &s).unwrap();
        assert!((a - mean).amax() < 1e-8);
    }

    #[test]
    fn log_prob_at_mean() {
        let p = random_policy(5);
        let g = Gains::identity(2);
        let s = PlantState::from_slices(&[0.4, -0.3], &[0.1, 0.2]).unwrap();
        let mean = controller_mean(&p, &g, &s).unwrap();
        let lp = policy_log_prob(&p, &g, &s, &mean).unwrap();
        let sigma = 0.7f64;
        let expect = -(2.0 * PI).ln() - 2.0 * sigma.ln();
        assert!((lp - expect).abs() < 1e-12);

        let (lp2, grad) = policy_log_prob_grad(&p, &g, &s, &mean).unwrap();
        assert!((lp2 - expect).abs() < 1e-12);
        let n = p.flow.num_params();
        assert!(grad[..n].iter().all(|&x| x == 0.0));
        assert!(grad[n..].iter().all(|&x| (x + 1.0).abs() < 1e-12));
    }

    #[test]
    fn empirical_std_matches() {
        let mut p = identity_policy();
        p.log_std = vec![0.3f64.ln(), 2.0f64.ln()];
        let g = Gains::identity(2);
        let s = PlantState::from_slices(&[0.5, 0.5], &[0.0, 0.0]).unwrap();
        let mean = controller_mean(&p, &g, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let (a, _) = policy_sample(&p, &g, &s, &mut rng).unwrap();
            for i in 0..2 {
                sq[i] += (a[i] - mean[i]).powi(2);
            }
        }
        for (i, target) in [0.3, 2.0].iter().enumerate() {
            let std = (sq[i] / n as f64).sqrt();
            assert!((std / target - 1.0).abs() < 0.02, "dim {i}: {std}");
        }
    }

    #[test]
    fn damping_is_dissipative() {
        let p = random_policy(8);
        let g = Gains::identity(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let s = PlantState::from_slices(
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                &[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            )
            .unwrap();
            let (_, damper) = controller_terms(&p, &g, &s).unwrap();
            assert!(s.xdot.dot(&damper) < 0.0);
        }
        let rest = PlantState::at_rest(v(&[0.3, 0.3]));
        let (_, damper) = controller_terms(&p, &g, &rest).unwrap();
        assert_eq!(damper, DVector::zeros(2));
    }

    #[test]
    fn set_trainable_floors_log_std() {
        let mut p = identity_policy();
        let mut values = p.trainable();
        let n = values.len();
        values[n - 1] = -50.0;
        p.set_trainable(&values).unwrap();
        assert_eq!(p.log_std[1], LOG_STD_FLOOR);
    }

    #[test]
    fn policy_json_round_trip() {
        let p = random_policy(12);
        let text = serde_json::to_string(&p).unwrap();
        let back: PolicyParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
