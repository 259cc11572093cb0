use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::gae::{compute_gae, normalize_advantages};
use super::policy::{Policy, ValueFunction};
use crate::controller::PlantState;
use crate::dynamics::{simulate, RewardConfig, SimConfig, Task, Trajectory};
use crate::error::{Error, Result};
use crate::parallel::par_map;

/// Hidden layer widths of the value network.
pub const VALUE_HIDDEN: [usize; 2] = [32, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs_per_iter: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub n_rollouts_per_iter: usize,
    pub horizon_steps: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Weight of the Gaussian entropy bonus; zero disables it.
    pub entropy_coef: f64,
    /// Global gradient-norm clip per minibatch step; zero disables it.
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs_per_iter: 10,
            minibatch_size: 64,
            learning_rate: 3e-4,
            n_rollouts_per_iter: 15,
            horizon_steps: 200,
            max_iters: 100,
            seed: 0,
            entropy_coef: 0.0,
            max_grad_norm: 0.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be positive");
        }
        if self.epochs_per_iter == 0 || self.minibatch_size == 0 {
            return bad("epochs_per_iter and minibatch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.n_rollouts_per_iter == 0 || self.horizon_steps == 0 {
            return bad("n_rollouts_per_iter and horizon_steps must be positive");
        }
        if !(self.entropy_coef.is_finite() && self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad("entropy_coef and max_grad_norm must be finite, max_grad_norm non-negative");
        }
        Ok(())
    }
}

/// Everything `train` needs besides the task and the initial policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub sim: SimConfig,
    pub reward: RewardConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.sim.validate()?;
        self.reward.validate()
    }
}

/// One transition prepared for the policy update.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub state: PlantState,
    pub action: DVector<f64>,
    /// Log probability under the policy that collected it.
    pub log_prob: f64,
    pub advantage: f64,
    /// Value target (advantage plus value estimate).
    pub target: f64,
}

/// Clipped-surrogate objective and its gradient over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateEval {
    pub objective: f64,
    pub grad: Vec<f64>,
    /// Fraction of samples on the clipped branch.
    pub clip_fraction: f64,
    /// Largest `|ρ − 1|` seen.
    pub max_ratio_deviation: f64,
}

fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std
        .iter()
        .map(|l| l + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())
        .sum()
}

/// `mean(min(ρA, clip(ρ, 1−ε, 1+ε)A)) + c_H·H(π)`.
pub fn surrogate_objective<P: Policy>(policy: &P, samples: &[Sample], clip: f64, entropy_coef: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let ratio = (policy.log_prob(&s.state, &s.action)? - s.log_prob).exp();
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * s.advantage;
        total += (ratio * s.advantage).min(clipped);
    }
    Ok(total / samples.len() as f64 + entropy_coef * gaussian_entropy(policy.log_std()))
}

/// Gradient of [`surrogate_objective`]. Samples on the clipped branch
/// contribute nothing.
pub fn surrogate_gradient<P: Policy>(
    policy: &P,
    samples: &[Sample],
    clip: f64,
    entropy_coef: f64,
    jobs: usize,
) -> Result<SurrogateEval> {
    if samples.is_empty() {
        return Err(Error::Shape("empty sample batch".into()));
    }
    let per_sample = par_map(jobs, samples.len(), |i| {
        let s = &samples[i];
        policy.log_prob_grad(&s.state, &s.action).map(|(lp, g)| {
            let ratio = (lp - s.log_prob).exp();
            let plain = ratio * s.advantage;
            let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * s.advantage;
            (ratio, plain, clipped, g)
        })
    });
    let n = samples.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut objective = 0.0;
    let mut n_clipped = 0usize;
    let mut max_dev = 0.0f64;
    for (res, s) in per_sample.into_iter().zip(samples) {
        let (ratio, plain, clipped, g) = res?;
        max_dev = max_dev.max((ratio - 1.0).abs());
        if clipped < plain {
            objective += clipped;
            n_clipped += 1;
        } else {
            objective += plain;
            let w = ratio * s.advantage / n;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += w * gi;
            }
        }
    }
    objective /= n;
    let d = policy.dim();
    let p = grad.len();
    objective += entropy_coef * gaussian_entropy(policy.log_std());
    for g in &mut grad[p - d..] {
        *g += entropy_coef;
    }
    if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("surrogate objective".into()));
    }
    Ok(SurrogateEval {
        objective,
        grad,
        clip_fraction: n_clipped as f64 / n,
        max_ratio_deviation: max_dev,
    })
}

/// Adam states for the policy and the value function.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub policy: Adam,
    pub value: Adam,
}

impl Optimizers {
    pub fn new<P: Policy>(policy: &P, value: &ValueFunction, lr: f64) -> Self {
        Optimizers {
            policy: Adam::new(policy.num_params(), lr),
            value: Adam::new(value.net.num_params(), lr),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// Surrogate objective averaged over the minibatches of the last epoch.
    pub objective: f64,
    /// Value loss averaged over the minibatches of the last epoch.
    pub value_loss: f64,
    pub clip_fraction: f64,
    /// `max |ρ − 1|` on the very first minibatch, before any step.
    pub initial_ratio_deviation: f64,
    pub minibatch_steps: usize,
}

fn clip_norm(grad: &mut [f64], max_norm: f64) {
    if max_norm > 0.0 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_norm {
            let k = max_norm / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// Epochs of shuffled-minibatch ascent on the clipped surrogate plus descent
/// on the value loss. Advantages are expected to be normalized already. On
/// error nothing is modified.
pub fn ppo_update<P: Policy>(
    policy: &mut P,
    value: &mut ValueFunction,
    optim: &mut Optimizers,
    samples: &[Sample],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
    jobs: usize,
) -> Result<UpdateStats> {
    if samples.is_empty() {
        return Err(Error::Shape("empty sample batch".into()));
    }
    let mut pol = policy.clone();
    let mut val = value.clone();
    let mut opt = optim.clone();
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut theta = pol.params();
    for epoch in 0..cfg.epochs_per_iter {
        order.shuffle(rng);
        let (mut obj_sum, mut vloss_sum, mut clip_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (mb, idx) in order.chunks(cfg.minibatch_size).enumerate() {
            let batch: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let eval = surrogate_gradient(&pol, &batch, cfg.clip_epsilon, cfg.entropy_coef, jobs)
                .map_err(|_| Error::NonFiniteLoss { epoch, minibatch: mb })?;
            if epoch == 0 && mb == 0 {
                stats.initial_ratio_deviation = eval.max_ratio_deviation;
            }
            let mut step: Vec<f64> = eval.grad.iter().map(|g| -g).collect();
            clip_norm(&mut step, cfg.max_grad_norm);
            opt.policy.step(&mut theta, &step);
            pol.set_params(&theta)?;
            theta = pol.params();

            let mut vgrad = vec![0.0; val.net.num_params()];
            let mut vloss = 0.0;
            for s in &batch {
                vloss += val.loss_grad(&s.state, s.target, &mut vgrad);
            }
            let k = 1.0 / batch.len() as f64;
            vgrad.iter_mut().for_each(|g| *g *= k);
            vloss *= k;
            if !vloss.is_finite() || vgrad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, minibatch: mb });
            }
            clip_norm(&mut vgrad, cfg.max_grad_norm);
            opt.value.step(&mut val.net.params, &vgrad);

            obj_sum += eval.objective;
            vloss_sum += vloss;
            clip_sum += eval.clip_fraction;
            batches += 1;
            stats.minibatch_steps += 1;
        }
        let b = batches as f64;
        stats.objective = obj_sum / b;
        stats.value_loss = vloss_sum / b;
        stats.clip_fraction = clip_sum / b;
    }
    *policy = pol;
    *value = val;
    *optim = opt;
    Ok(stats)
}

/// Per-iteration training summary. Rollout statistics come from the
/// stochastic training episodes of the iteration; the success rate from the
/// deterministic evaluation of the same parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean undiscounted episode reward.
    pub mean_return: f64,
    pub success_rate: f64,
    /// Mean exploration standard deviation (N).
    pub mean_policy_std: f64,
    /// Mean action norm (N).
    pub mean_abs_u: f64,
    /// Mean distance to the goal over all visited states (m).
    pub mean_dist: f64,
    /// Training episodes dropped after diverging.
    pub episodes_discarded: usize,
    pub wall_seconds: f64,
}

pub struct TrainOutcome<P> {
    pub policy: P,
    pub value: ValueFunction,
    pub metrics: Vec<IterationMetrics>,
}

/// Random stream of training episode `episode` in iteration `iteration`.
pub fn episode_rng(seed: u64, iteration: usize, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + ((iteration as u64) << 24) + episode as u64);
    rng
}

fn auxiliary_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - stream);
    rng
}

/// Deterministic episode from `start` using the policy mean.
pub fn deterministic_episode<P: Policy>(task: &Task, policy: &P, start: PlantState, cfg: &TrainConfig) -> Result<Trajectory> {
    simulate(task.plant(), start, cfg.ppo.horizon_steps, &cfg.sim, &task.x_ref(), &cfg.reward, |s| {
        Ok((policy.mean(s)?, 0.0))
    })
}

fn is_episode_failure(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::NonFinite(_) | Error::NonFiniteLayer { .. })
}

/// Clipped-surrogate training of `policy` on `task`. `on_iteration` receives
/// each iteration's metrics together with the updated policy.
pub fn train<P, F>(task: &Task, policy: P, cfg: &TrainConfig, jobs: usize, mut on_iteration: F) -> Result<TrainOutcome<P>>
where
    P: Policy,
    F: FnMut(&IterationMetrics, &P) -> Result<()>,
{
    cfg.validate()?;
    task.validate()?;
    if policy.dim() != task.dim() {
        return Err(Error::Shape(format!("{}-d policy for a {}-d task", policy.dim(), task.dim())));
    }
    let ppo = &cfg.ppo;
    let x_ref = task.x_ref();
    let mut policy = policy;
    let mut value = ValueFunction::init(task.dim(), &VALUE_HIDDEN, &x_ref, &mut auxiliary_rng(ppo.seed, 0))?;
    let mut optim = Optimizers::new(&policy, &value, ppo.learning_rate);
    let mut shuffle_rng = auxiliary_rng(ppo.seed, 1);
    let eval_starts = task.eval_starts();
    let mut metrics = Vec::with_capacity(ppo.max_iters);

    for iteration in 0..ppo.max_iters {
        let clock = Instant::now();
        let episodes = par_map(jobs, ppo.n_rollouts_per_iter, |e| {
            let mut rng = episode_rng(ppo.seed, iteration, e);
            let start = task.sample_start(&mut rng);
            simulate(task.plant(), start, ppo.horizon_steps, &cfg.sim, &x_ref, &cfg.reward, |s| {
                policy.sample(s, &mut rng)
            })
        });
        let mut trajs = Vec::with_capacity(episodes.len());
        let mut discarded = 0;
        for (e, res) in episodes.into_iter().enumerate() {
            match res {
                Ok(t) => trajs.push(t),
                Err(err) if is_episode_failure(&err) => {
                    log::warn!("iteration {iteration}: episode {e} discarded: {err}");
                    discarded += 1;
                }
                Err(err) => return Err(err),
            }
        }
        if trajs.is_empty() {
            return Err(Error::NonFinite(format!(
                "iteration {iteration}: all {} training episodes diverged",
                ppo.n_rollouts_per_iter
            )));
        }

        let evals = par_map(jobs, eval_starts.len(), |i| {
            deterministic_episode(task, &policy, eval_starts[i].clone(), cfg)
        });
        let mut successes = 0;
        for res in evals {
            match res {
                Ok(t) => successes += usize::from(t.success),
                Err(err) if is_episode_failure(&err) => {}
                Err(err) => return Err(err),
            }
        }

        let (mut ret_sum, mut u_sum, mut n_u, mut dist_sum, mut n_x) = (0.0, 0.0, 0usize, 0.0, 0usize);
        for t in &trajs {
            ret_sum += t.total_reward();
            u_sum += t.actions.iter().map(|u| u.norm()).sum::<f64>();
            n_u += t.actions.len();
            dist_sum += t.states.iter().map(|s| (&s.x - &x_ref).norm()).sum::<f64>();
            n_x += t.states.len();
        }
        let avg = |s: f64, n: usize| if n > 0 { s / n as f64 } else { f64::NAN };
        let mean_policy_std = policy.mean_std();

        let mut samples = Vec::with_capacity(trajs.len() * ppo.horizon_steps);
        for t in &trajs {
            let values: Vec<f64> = t.states.iter().map(|s| value.predict(s)).collect();
            let (adv, targets) = compute_gae(&t.rewards, &values, ppo.gamma, ppo.gae_lambda)?;
            for k in 0..t.len() {
                samples.push(Sample {
                    state: t.states[k].clone(),
                    action: t.actions[k].clone(),
                    log_prob: t.log_probs[k],
                    advantage: adv[k],
                    target: targets[k],
                });
            }
        }
        let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut adv);
        for (s, a) in samples.iter_mut().zip(adv) {
            s.advantage = a;
        }
        let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
        value.retarget(&targets);
        match ppo_update(&mut policy, &mut value, &mut optim, &samples, ppo, &mut shuffle_rng, jobs) {
            Ok(stats) => log::debug!(
                "iteration {iteration}: surrogate {:.4} value loss {:.4} clipped {:.3}",
                stats.objective,
                stats.value_loss,
                stats.clip_fraction
            ),
            Err(err @ Error::NonFiniteLoss { .. }) => log::warn!("iteration {iteration}: update skipped: {err}"),
            Err(err) => return Err(err),
        }

        let m = IterationMetrics {
            iteration,
            mean_return: avg(ret_sum, trajs.len()),
            success_rate: successes as f64 / eval_starts.len() as f64,
            mean_policy_std,
            mean_abs_u: avg(u_sum, n_u),
            mean_dist: avg(dist_sum, n_x),
            episodes_discarded: discarded,
            wall_seconds: clock.elapsed().as_secs_f64(),
        };
        log::info!(
            "iteration {iteration}: return {:.2} success {:.2} std {:.3} dist {:.4}",
            m.mean_return,
            m.success_rate,
            m.mean_policy_std,
            m.mean_dist
        );
        on_iteration(&m, &policy)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { policy, value, metrics })
}

/// First iteration starting a run of three consecutive iterations with
/// success rate at least 0.9.
pub fn itr90(success: &[f64]) -> Option<usize> {
    success.windows(3).position(|w| w.iter().all(|s| *s >= 0.9))
}

/// Mean success rate over iterations `0..=last` (missing iterations count as
/// zero).
pub fn success_auc(success: &[f64], last: usize) -> f64 {
    (0..=last).map(|i| success.get(i).copied().unwrap_or(0.0)).sum::<f64>() / (last + 1) as f64
}
