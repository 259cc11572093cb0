use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controller::PlantState;
use crate::error::{Error, Result};

/// Weights of `r = −(w_q‖Δx‖² + w_log·ln(‖Δx‖² + α) + w_u‖u‖²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_q: f64,
    pub w_log: f64,
    pub alpha: f64,
    pub w_u: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_q: 1.0,
            w_log: 1.0,
            alpha: 1e-5,
            w_u: 1e-4,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_q, self.w_log, self.w_u];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("reward weights must be finite and non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("reward alpha must be positive".into()));
        }
        Ok(())
    }
}

pub fn reward_fn(state: &PlantState, u: &DVector<f64>, x_ref: &DVector<f64>, cfg: &RewardConfig) -> f64 {
    let d2 = (&state.x - x_ref).norm_squared();
    -(cfg.w_q * d2 + cfg.w_log * (d2 + cfg.alpha).ln() + cfg.w_u * u.norm_squared())
}

/// `∂r/∂x`.
pub fn reward_grad_x(state: &PlantState, x_ref: &DVector<f64>, cfg: &RewardConfig) -> DVector<f64> {
    let diff = &state.x - x_ref;
    let d2 = diff.norm_squared();
    diff * -(2.0 * cfg.w_q + 2.0 * cfg.w_log / (d2 + cfg.alpha))
}
