use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::controller::{
    controller_mean, gaussian_log_prob, policy_log_prob_grad, Gains, PlantState, PolicyParams, LOG_STD_FLOOR,
};
use crate::error::{Error, Result};
use crate::flow::FlowParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "nf")]
    Nf,
    #[serde(rename = "baseline")]
    Baseline,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Nf => "nf",
            PolicyKind::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nf" => Ok(PolicyKind::Nf),
            "baseline" => Ok(PolicyKind::Baseline),
            other => Err(Error::Config(format!("unknown policy kind `{other}` (expected nf or baseline)"))),
        }
    }
}

/// Diagonal-Gaussian policy with a state-dependent mean and a trainable
/// state-independent `log_std`.
///
/// The flat parameter vector always ends with the `dim()` log standard
/// deviations.
pub trait Policy: Clone + Send + Sync {
    fn kind(&self) -> PolicyKind;

    fn dim(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    /// Replaces all trainable values; `log_std` entries are floored.
    fn set_params(&mut self, values: &[f64]) -> Result<()>;

    fn log_std(&self) -> &[f64];

    fn mean(&self, state: &PlantState) -> Result<DVector<f64>>;

    /// `log π(a|s)` and its gradient over `params()`.
    fn log_prob_grad(&self, state: &PlantState, action: &DVector<f64>) -> Result<(f64, Vec<f64>)>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn log_prob(&self, state: &PlantState, action: &DVector<f64>) -> Result<f64> {
        Ok(gaussian_log_prob(&self.mean(state)?, self.log_std(), action))
    }

    fn sample<R: Rng + ?Sized>(&self, state: &PlantState, rng: &mut R) -> Result<(DVector<f64>, f64)> {
        let mean = self.mean(state)?;
        let noise = (0..mean.len()).map(|i| self.log_std()[i].exp() * rng.sample::<f64, _>(StandardNormal));
        let action = &mean + DVector::from_iterator(mean.len(), noise);
        let lp = gaussian_log_prob(&mean, self.log_std(), &action);
        Ok((action, lp))
    }

    fn mean_std(&self) -> f64 {
        let ls = self.log_std();
        ls.iter().map(|l| l.exp()).sum::<f64>() / ls.len() as f64
    }
}

/// Normalizing-flow controller with additive Gaussian exploration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfPolicy {
    pub params: PolicyParams,
    pub gains: Gains,
}

impl NfPolicy {
    pub fn new(params: PolicyParams, gains: Gains) -> Result<Self> {
        params.validate()?;
        gains.check_dim(params.dim())?;
        Ok(NfPolicy { params, gains })
    }

    /// Randomly initialized flow with spherical noise `sigma_init`.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        n_flow: usize,
        n_h: usize,
        sigma_init: f64,
        x_ref: &DVector<f64>,
        gains: Gains,
        rng: &mut R,
    ) -> Result<Self> {
        let flow = FlowParams::random(dim, n_flow, n_h, rng)?;
        Self::new(PolicyParams::with_sigma(flow, sigma_init, x_ref.iter().copied().collect())?, gains)
    }
}

impl Policy for NfPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Nf
    }

    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn params(&self) -> Vec<f64> {
        self.params.trainable()
    }

    fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        self.params.set_trainable(values)
    }

    fn log_std(&self) -> &[f64] {
        &self.params.log_std
    }

    fn mean(&self, state: &PlantState) -> Result<DVector<f64>> {
        controller_mean(&self.params, &self.gains, state)
    }

    fn log_prob_grad(&self, state: &PlantState, action: &DVector<f64>) -> Result<(f64, Vec<f64>)> {
        policy_log_prob_grad(&self.params, &self.gains, state, action)
    }
}

/// Network input `[x − x_ref, ẋ]`.
fn features(state: &PlantState, x_ref: &[f64]) -> Vec<f64> {
    state
        .x
        .iter()
        .zip(x_ref)
        .map(|(x, r)| x - r)
        .chain(state.xdot.iter().copied())
        .collect()
}

/// Dense-network mean with a trainable `log_std`; the comparison policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselinePolicy {
    pub net: Mlp,
    pub log_std: Vec<f64>,
    pub x_ref: Vec<f64>,
}

/// Output-layer scale of a freshly initialized baseline mean network.
pub const BASELINE_OUTPUT_SCALE: f64 = 0.01;

impl BaselinePolicy {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        hidden: &[usize],
        sigma_init: f64,
        x_ref: &DVector<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if !(sigma_init > 0.0) {
            return Err(Error::Config(format!("sigma_init must be positive, got {sigma_init}")));
        }
        if x_ref.len() != dim {
            return Err(Error::Shape("x_ref length".into()));
        }
        let mut sizes = vec![2 * dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Ok(BaselinePolicy {
            net: Mlp::random(&sizes, BASELINE_OUTPUT_SCALE, rng)?,
            log_std: vec![sigma_init.ln(); dim],
            x_ref: x_ref.iter().copied().collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let d = self.log_std.len();
        if self.net.input_dim() != 2 * d || self.net.output_dim() != d || self.x_ref.len() != d {
            return Err(Error::Shape("baseline network does not match its log_std/x_ref".into()));
        }
        Ok(())
    }
}

impl Policy for BaselinePolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Baseline
    }

    fn dim(&self) -> usize {
        self.log_std.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut v = self.net.params.clone();
        v.extend_from_slice(&self.log_std);
        v
    }

    fn num_params(&self) -> usize {
        self.net.num_params() + self.log_std.len()
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let p = self.net.num_params();
        if values.len() != p + self.log_std.len() {
            return Err(Error::Shape(format!(
                "expected {} trainable values, got {}",
                p + self.log_std.len(),
                values.len()
            )));
        }
        self.net.params.copy_from_slice(&values[..p]);
        for (l, v) in self.log_std.iter_mut().zip(&values[p..]) {
            *l = v.max(LOG_STD_FLOOR);
        }
        Ok(())
    }

    fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    fn mean(&self, state: &PlantState) -> Result<DVector<f64>> {
        if state.dim() != self.dim() {
            return Err(Error::Shape(format!("{}-d state for a {}-d policy", state.dim(), self.dim())));
        }
        let out = self.net.forward(&features(state, &self.x_ref));
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("baseline policy output".into()));
        }
        Ok(DVector::from_vec(out))
    }

    fn log_prob_grad(&self, state: &PlantState, action: &DVector<f64>) -> Result<(f64, Vec<f64>)> {
        if state.dim() != self.dim() || action.len() != self.dim() {
            return Err(Error::Shape("state or action length".into()));
        }
        let (out, acts) = self.net.forward_cached(&features(state, &self.x_ref));
        let mean = DVector::from_vec(out);
        let d = self.dim();
        let p = self.net.num_params();
        let mut grad = vec![0.0; p + d];
        let mut w = vec![0.0; d];
        for r in 0..d {
            let var = (2.0 * self.log_std[r]).exp();
            let resid = action[r] - mean[r];
            w[r] = resid / var;
            grad[p + r] = resid * resid / var - 1.0;
        }
        self.net.backward(&acts, &w, &mut grad[..p]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("log-probability gradient".into()));
        }
        Ok((gaussian_log_prob(&mean, &self.log_std, action), grad))
    }
}

/// State-value estimate `V(s) = μ + σ·net([x − x_ref, ẋ])`, with `(μ, σ)`
/// tracking the scale of the return targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub net: Mlp,
    pub x_ref: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl ValueFunction {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: &[usize], x_ref: &DVector<f64>, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![2 * dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(ValueFunction {
            net: Mlp::random(&sizes, 1.0, rng)?,
            x_ref: x_ref.iter().copied().collect(),
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    pub fn predict(&self, state: &PlantState) -> f64 {
        self.target_mean + self.target_std * self.net.forward(&features(state, &self.x_ref))[0]
    }

    /// Squared error `½(net(s) − (target − μ)/σ)²` in normalized units and its
    /// parameter gradient, accumulated into `grad`.
    pub fn loss_grad(&self, state: &PlantState, target: f64, grad: &mut [f64]) -> f64 {
        let (out, acts) = self.net.forward_cached(&features(state, &self.x_ref));
        let err = out[0] - (target - self.target_mean) / self.target_std;
        self.net.backward(&acts, &[err], grad);
        0.5 * err * err
    }

    /// Moves `(μ, σ)` to the statistics of `targets`, rescaling the output
    /// layer so every prediction is unchanged.
    pub fn retarget(&mut self, targets: &[f64]) {
        if targets.is_empty() {
            return;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let std = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
        let (w, b) = self.net.output_layer();
        let ratio = self.target_std / std;
        for p in &mut self.net.params[w] {
            *p *= ratio;
        }
        let bias = &mut self.net.params[b.start];
        *bias = (self.target_std * *bias + self.target_mean - mean) / std;
        self.target_mean = mean;
        self.target_std = std;
    }
}

/// Saved policy, tagged by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Checkpoint {
    #[serde(rename = "nf")]
    Nf { policy: PolicyParams, gains: Gains },
    #[serde(rename = "baseline")]
    Baseline { policy: BaselinePolicy },
}

impl Checkpoint {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        match &c {
            Checkpoint::Nf { policy, gains } => {
                policy.validate()?;
                gains.check_dim(policy.dim())?;
            }
            Checkpoint::Baseline { policy } => policy.validate()?,
        }
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Checkpoint::Nf { .. } => PolicyKind::Nf,
            Checkpoint::Baseline { .. } => PolicyKind::Baseline,
        }
    }
}

impl From<&NfPolicy> for Checkpoint {
    fn from(p: &NfPolicy) -> Self {
        Checkpoint::Nf {
            policy: p.params.clone(),
            gains: p.gains.clone(),
        }
    }
}

impl From<&BaselinePolicy> for Checkpoint {
    fn from(p: &BaselinePolicy) -> Self {
        Checkpoint::Baseline { policy: p.clone() }
    }
}
