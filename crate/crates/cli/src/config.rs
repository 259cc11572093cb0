//! Experiment configuration: one TOML file with `[task]`, `[policy]`,
//! `[ppo]`, `[reward]`, `[output]` and optional `[verify]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stableflow_core::dynamics::{
    BlockGeometry, BlockInsertionPlant, ContactParams, PointMass, RewardConfig, SimConfig, StartDistribution, Task,
    TaskKind, TwoLinkArmPlant,
};
use stableflow_core::ppo::{PolicyKind, PpoConfig, TrainConfig};
use stableflow_core::verify::VerifyConfig;
use stableflow_core::Gains;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Control period (s).
    pub dt_control: f64,
    /// Physics substeps per control period.
    pub substeps: usize,
    /// Rollouts leaving this radius (m) are treated as diverged.
    pub workspace_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockGeometry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contact: Option<ContactParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arm: Option<TwoLinkArmPlant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<PointMass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub starts: Option<StartDistribution>,
}

impl Default for TaskSection {
    fn default() -> Self {
        let sim = SimConfig::default();
        TaskSection {
            kind: TaskKind::Block2d,
            dt_control: sim.dt_control,
            substeps: sim.substeps,
            workspace_bound: sim.workspace_bound,
            block: None,
            contact: None,
            arm: None,
            point: None,
            starts: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// Flow elements (two coupling layers each).
    pub n_flow: usize,
    /// Hidden width of each coupling network.
    pub n_h: usize,
    /// Initial exploration standard deviation (N).
    pub sigma_init: f64,
    /// `S = s_scale · I`.
    pub s_scale: f64,
    /// `D = d_scale · I`.
    pub d_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            kind: PolicyKind::Nf,
            n_flow: 2,
            n_h: 8,
            sigma_init: 2.0,
            s_scale: 1.0,
            d_scale: 1.0,
        }
    }
}

/// Trainer settings; `seeds` lists the independent runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoSection {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs_per_iter: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub n_rollouts_per_iter: usize,
    pub horizon_steps: usize,
    pub max_iters: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub seeds: Vec<u64>,
}

impl Default for PpoSection {
    fn default() -> Self {
        let p = PpoConfig::default();
        PpoSection {
            gamma: p.gamma,
            gae_lambda: p.gae_lambda,
            clip_epsilon: p.clip_epsilon,
            epochs_per_iter: p.epochs_per_iter,
            minibatch_size: p.minibatch_size,
            learning_rate: p.learning_rate,
            n_rollouts_per_iter: p.n_rollouts_per_iter,
            horizon_steps: p.horizon_steps,
            max_iters: p.max_iters,
            entropy_coef: p.entropy_coef,
            max_grad_norm: p.max_grad_norm,
            seeds: vec![0],
        }
    }
}

impl PpoSection {
    pub fn for_seed(&self, seed: u64) -> PpoConfig {
        PpoConfig {
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            clip_epsilon: self.clip_epsilon,
            epochs_per_iter: self.epochs_per_iter,
            minibatch_size: self.minibatch_size,
            learning_rate: self.learning_rate,
            n_rollouts_per_iter: self.n_rollouts_per_iter,
            horizon_steps: self.horizon_steps,
            max_iters: self.max_iters,
            seed,
            entropy_coef: self.entropy_coef,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write a checkpoint every this many iterations.
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub policy: PolicySection,
    pub ppo: PpoSection,
    pub reward: RewardConfig,
    pub output: OutputSection,
    pub verify: VerifyConfig,
}

fn field_err(section: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("[{section}] {e}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config serialization: {e}")))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            dt_control: self.task.dt_control,
            substeps: self.task.substeps,
            workspace_bound: self.task.workspace_bound,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.build_task()?;
        self.sim().validate().map_err(|e| field_err("task", e))?;
        let p = &self.policy;
        if p.n_flow == 0 || p.n_h == 0 {
            return Err(field_err("policy", "n_flow and n_h must be positive"));
        }
        if !(p.sigma_init > 0.0 && p.sigma_init.is_finite()) {
            return Err(field_err("policy", "sigma_init must be positive"));
        }
        self.gains().map_err(|e| field_err("policy", e))?;
        self.ppo.for_seed(0).validate().map_err(|e| field_err("ppo", e))?;
        if self.ppo.seeds.is_empty() {
            return Err(field_err("ppo", "seeds must not be empty"));
        }
        self.reward.validate().map_err(|e| field_err("reward", e))?;
        if self.output.checkpoint_every == 0 {
            return Err(field_err("output", "checkpoint_every must be at least 1"));
        }
        self.verify.sim.validate().map_err(|e| field_err("verify", e))?;
        if !(self.verify.eps_int >= 0.0 && self.verify.horizon > 0.0 && self.verify.long_horizon > 0.0) {
            return Err(field_err("verify", "eps_int must be non-negative and horizons positive"));
        }
        Ok(())
    }

    pub fn gains(&self) -> stableflow_core::Result<Gains> {
        let dim = self.dimension();
        Gains::scaled_identity(dim, self.policy.s_scale, self.policy.d_scale)
    }

    pub fn dimension(&self) -> usize {
        match self.task.kind {
            TaskKind::FreePoint => self.task.point.as_ref().map_or(2, |p| p.dim),
            _ => 2,
        }
    }

    pub fn build_task(&self) -> Result<Task, CliError> {
        let t = &self.task;
        let unused = |name: &str, present: bool| {
            if present {
                Err(field_err("task", format!("`{name}` does not apply to task {}", t.kind.as_str())))
            } else {
                Ok(())
            }
        };
        let task = match t.kind {
            TaskKind::Block2d => {
                unused("arm", t.arm.is_some())?;
                unused("point", t.point.is_some())?;
                unused("starts", t.starts.is_some())?;
                let plant = BlockInsertionPlant::new(t.block.clone().unwrap_or_default(), t.contact.unwrap_or_default())
                    .map_err(|e| field_err("task", e))?;
                Task::Block(plant)
            }
            TaskKind::Arm2Link => {
                unused("block", t.block.is_some())?;
                unused("contact", t.contact.is_some())?;
                unused("point", t.point.is_some())?;
                let Task::Arm { starts, .. } = Task::default_for(TaskKind::Arm2Link) else {
                    unreachable!()
                };
                Task::Arm {
                    plant: t.arm.clone().unwrap_or_default(),
                    starts: t.starts.clone().unwrap_or(starts),
                }
            }
            TaskKind::FreePoint => {
                unused("block", t.block.is_some())?;
                unused("contact", t.contact.is_some())?;
                unused("arm", t.arm.is_some())?;
                let plant = t.point.clone().unwrap_or_default();
                let starts = t.starts.clone().unwrap_or_else(|| StartDistribution {
                    mean: vec![0.5; plant.dim],
                    std: vec![0.25; plant.dim],
                });
                Task::Point { plant, starts }
            }
        };
        task.validate().map_err(|e| field_err("task", e))?;
        Ok(task)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            ppo: self.ppo.for_seed(seed),
            sim: self.sim(),
            reward: self.reward,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.ppo.max_iters, 100);
        assert_eq!(cfg.policy.sigma_init, 2.0);
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"
            [task]
            kind = "free-point"
            [task.starts]
            mean = [0.2, 0.1]
            std = [0.1, 0.1]
            [policy]
            kind = "baseline"
            sigma_init = 1.5
            [ppo]
            max_iters = 3
            seeds = [4, 5]
            [reward]
            w_u = 0.001
            [output]
            dir = "runs/x"
            checkpoint_every = 2
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[ppo]\ngama = 0.9\n", "[bogus]\nx = 1\n", "[task.block]\nwidth = 1.0\n"] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn invalid_values_name_their_section() {
        let err = ExperimentConfig::from_toml("[ppo]\ngamma = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("[ppo]"), "{err}");
        let err = ExperimentConfig::from_toml("[policy]\nd_scale = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("[policy]"), "{err}");
        let err = ExperimentConfig::from_toml("[task]\nkind = \"block2d\"\n[task.arm]\nm1 = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("[task]"), "{err}");
    }
}
