use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BlockInsertionPlant, PlantModel, PointMass, TwoLinkArmPlant};
use crate::controller::PlantState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "block2d")]
    Block2d,
    #[serde(rename = "arm2link")]
    Arm2Link,
    #[serde(rename = "free-point")]
    FreePoint,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Block2d => "block2d",
            TaskKind::Arm2Link => "arm2link",
            TaskKind::FreePoint => "free-point",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block2d" => Ok(TaskKind::Block2d),
            "arm2link" => Ok(TaskKind::Arm2Link),
            "free-point" => Ok(TaskKind::FreePoint),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected block2d, arm2link or free-point)"
            ))),
        }
    }
}

/// Axis-aligned Gaussian over start positions; starts are at rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartDistribution {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StartDistribution {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.std.len() != dim {
            return Err(Error::Shape(format!("start distribution must be {dim}-d")));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("start distribution must be finite with non-negative std".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PlantState {
        let x = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| if s > 0.0 { Normal::new(m, s).unwrap().sample(rng) } else { m });
        PlantState::at_rest(DVector::from_iterator(self.mean.len(), x))
    }

    /// The mean and one standard deviation either side along each axis.
    pub fn fixed_points(&self) -> Vec<PlantState> {
        let mean = DVector::from_column_slice(&self.mean);
        let mut out = vec![PlantState::at_rest(mean.clone())];
        for i in 0..self.mean.len() {
            for sign in [-1.0, 1.0] {
                let mut x = mean.clone();
                x[i] += sign * self.std[i];
                out.push(PlantState::at_rest(x));
            }
        }
        out
    }
}

/// A plant together with its goal and start distribution. The goal is always
/// the coordinate origin.
#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Block(BlockInsertionPlant),
    Arm {
        plant: TwoLinkArmPlant,
        starts: StartDistribution,
    },
    Point {
        plant: PointMass,
        starts: StartDistribution,
    },
}

impl Task {
    pub fn default_for(kind: TaskKind) -> Task {
        match kind {
            TaskKind::Block2d => Task::Block(BlockInsertionPlant::default()),
            TaskKind::Arm2Link => Task::Arm {
                plant: TwoLinkArmPlant::default(),
                starts: StartDistribution {
                    mean: vec![0.5, -0.5],
                    std: vec![0.3, 0.3],
                },
            },
            TaskKind::FreePoint => Task::Point {
                plant: PointMass::default(),
                starts: StartDistribution {
                    mean: vec![0.5, 0.5],
                    std: vec![0.25, 0.25],
                },
            },
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Block(_) => TaskKind::Block2d,
            Task::Arm { .. } => TaskKind::Arm2Link,
            Task::Point { .. } => TaskKind::FreePoint,
        }
    }

    pub fn plant(&self) -> &dyn PlantModel {
        match self {
            Task::Block(p) => p,
            Task::Arm { plant, .. } => plant,
            Task::Point { plant, .. } => plant,
        }
    }

    pub fn dim(&self) -> usize {
        self.plant().dim()
    }

    pub fn x_ref(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Task::Block(p) => p.geometry.validate(),
            Task::Arm { starts, .. } | Task::Point { starts, .. } => starts.validate(self.dim()),
        }
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> PlantState {
        match self {
            Task::Block(p) => p.sample_start(rng),
            Task::Arm { starts, .. } | Task::Point { starts, .. } => starts.sample(rng),
        }
    }

    /// Fixed starts used for deterministic evaluation.
    pub fn eval_starts(&self) -> Vec<PlantState> {
        match self {
            Task::Block(p) => p.eval_starts(),
            Task::Arm { starts, .. } | Task::Point { starts, .. } => starts.fixed_points(),
        }
    }
}
