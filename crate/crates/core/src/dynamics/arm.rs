use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::PlantModel;
use crate::controller::PlantState;

/// Planar two-revolute arm with uniform rods; gravity is compensated, so the
/// effective `g(x)` is zero. Coordinates are the joint angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoLinkArmPlant {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    /// Joint-space distance from the origin counted as success (rad).
    pub goal_radius: f64,
}

impl Default for TwoLinkArmPlant {
    fn default() -> Self {
        TwoLinkArmPlant {
            m1: 1.0,
            m2: 1.0,
            l1: 0.3,
            l2: 0.3,
            goal_radius: 0.01,
        }
    }
}

impl TwoLinkArmPlant {
    fn inertia_terms(&self) -> (f64, f64, f64, f64, f64) {
        let lc1 = 0.5 * self.l1;
        let lc2 = 0.5 * self.l2;
        let i1 = self.m1 * self.l1 * self.l1 / 12.0;
        let i2 = self.m2 * self.l2 * self.l2 / 12.0;
        (lc1, lc2, i1, i2, self.m2 * self.l1 * lc2)
    }

    /// Kinetic energy `½ q̇ᵀ M(q) q̇`.
    pub fn kinetic_energy(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> f64 {
        0.5 * qdot.dot(&(self.mass_matrix(q) * qdot))
    }
}

impl PlantModel for TwoLinkArmPlant {
    fn dim(&self) -> usize {
        2
    }

    fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let (lc1, lc2, i1, i2, coupling) = self.inertia_terms();
        let c2 = q[1].cos();
        let m22 = self.m2 * lc2 * lc2 + i2;
        let m12 = m22 + coupling * c2;
        let m11 = self.m1 * lc1 * lc1 + i1 + self.m2 * self.l1 * self.l1 + m22 + 2.0 * coupling * c2;
        DMatrix::from_row_slice(2, 2, &[m11, m12, m12, m22])
    }

    /// Christoffel-symbol form, for which `Ṁ − 2C` is skew-symmetric.
    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        let (_, _, _, _, coupling) = self.inertia_terms();
        let h = -coupling * q[1].sin();
        DMatrix::from_row_slice(2, 2, &[h * qdot[1], h * (qdot[0] + qdot[1]), -h * qdot[0], 0.0])
    }

    fn is_success(&self, state: &PlantState) -> bool {
        state.x.norm() < self.goal_radius
    }

    fn name(&self) -> &'static str {
        "arm2link"
    }
}
