//! Planar block insertion: a square block slides without rotating and must be
//! pushed into a slot that is 2 mm wider than the block.
//!
//! Coordinates put the goal (block centre resting on the slot floor) at the
//! origin; `+y` points out of the slot. The environment is three convex
//! polygons: the floor and two shoulders whose inner top corners carry an
//! optional 45° chamfer. Contact is a penalty model: spring-damper normal
//! force along the separating axis of least penetration plus regularized
//! Coulomb friction.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PlantModel;
use crate::controller::PlantState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactParams {
    /// Normal stiffness `k_c` (N/m).
    pub stiffness: f64,
    /// Normal damping `c_c` (N·s/m).
    pub damping: f64,
    /// Coulomb coefficient `μ_f`.
    pub friction: f64,
    /// Width of the linear stiction zone (m/s).
    pub stiction_velocity: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams {
            stiffness: 1e5,
            damping: 300.0,
            friction: 0.3,
            stiction_velocity: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockGeometry {
    /// Block mass (kg).
    pub mass: f64,
    /// Half of the block edge length (m).
    pub half_width: f64,
    /// Slot width minus block width (m).
    pub clearance: f64,
    /// Depth of the slot below the shoulder surface (m).
    pub slot_depth: f64,
    /// Leg length of the 45° chamfer on each slot edge (m); zero for sharp edges.
    pub chamfer: f64,
    /// Horizontal half-extent of the shoulders (m).
    pub extent: f64,
    /// Insertion depth counted as success (m).
    pub success_depth: f64,
    /// Mean of the initial block position (m).
    pub start_mean: [f64; 2],
    /// Per-axis standard deviation of the initial position (m).
    pub start_std: [f64; 2],
    /// Highest admissible start (m).
    pub start_ceiling: f64,
}

impl Default for BlockGeometry {
    fn default() -> Self {
        BlockGeometry {
            mass: 1.0,
            half_width: 0.025,
            clearance: 0.002,
            slot_depth: 0.1,
            chamfer: 0.02,
            extent: 0.4,
            success_depth: 0.025,
            start_mean: [0.0, 0.3],
            start_std: [0.05, 0.1],
            start_ceiling: 0.5,
        }
    }
}

impl BlockGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.mass,
            self.half_width,
            self.clearance,
            self.slot_depth,
            self.extent,
            self.success_depth,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("block geometry values must be positive".into()));
        }
        if self.chamfer < 0.0 || self.chamfer >= self.slot_depth {
            return Err(Error::Config("chamfer must lie in [0, slot_depth)".into()));
        }
        if self.success_depth > self.slot_depth {
            return Err(Error::Config("success depth exceeds slot depth".into()));
        }
        if self.start_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("start std must be non-negative".into()));
        }
        Ok(())
    }

    /// Half width of the slot opening.
    pub fn gap(&self) -> f64 {
        self.half_width + 0.5 * self.clearance
    }

    /// Height of the shoulder surface.
    pub fn top(&self) -> f64 {
        self.slot_depth - self.half_width
    }

    pub fn floor(&self) -> f64 {
        -self.half_width
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<Vector2<f64>>,
}

impl Polygon {
    fn new(vertices: Vec<[f64; 2]>) -> Self {
        Polygon {
            vertices: vertices.into_iter().map(|[x, y]| Vector2::new(x, y)).collect(),
        }
    }

    fn outward_normals(&self) -> impl Iterator<Item = Vector2<f64>> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| {
            let e = self.vertices[(i + 1) % n] - self.vertices[i];
            Vector2::new(e.y, -e.x).normalize()
        })
    }

    fn project(&self, axis: &Vector2<f64>) -> (f64, f64) {
        self.vertices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let p = v.dot(axis);
            (lo.min(p), hi.max(p))
        })
    }
}

/// Penetration of the block into one wall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contact {
    /// Unit normal pointing from the wall toward the block.
    pub normal: Vector2<f64>,
    /// Penetration depth (m), strictly positive.
    pub depth: f64,
}

/// Separating-axis penetration of an axis-aligned square into `wall`.
fn square_penetration(center: &Vector2<f64>, half: f64, wall: &Polygon) -> Option<Contact> {
    let mut best: Option<Contact> = None;
    let axes = [Vector2::x(), Vector2::y()].into_iter().chain(wall.outward_normals());
    for axis in axes {
        let c = center.dot(&axis);
        let r = half * (axis.x.abs() + axis.y.abs());
        let (lo, hi) = wall.project(&axis);
        let push_pos = hi - (c - r);
        let push_neg = (c + r) - lo;
        if push_pos <= 0.0 || push_neg <= 0.0 {
            return None;
        }
        let cand = if push_pos <= push_neg {
            Contact {
                normal: axis,
                depth: push_pos,
            }
        } else {
            Contact {
                normal: -axis,
                depth: push_neg,
            }
        };
        if best.map_or(true, |b| cand.depth < b.depth) {
            best = Some(cand);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockInsertionPlant {
    pub geometry: BlockGeometry,
    pub contact: ContactParams,
    walls: Vec<Polygon>,
}

impl Default for BlockInsertionPlant {
    fn default() -> Self {
        Self::new(BlockGeometry::default(), ContactParams::default()).expect("default geometry is valid")
    }
}

impl BlockInsertionPlant {
    pub fn new(geometry: BlockGeometry, contact: ContactParams) -> Result<Self> {
        geometry.validate()?;
        if !(contact.stiffness > 0.0 && contact.damping >= 0.0 && contact.friction >= 0.0 && contact.stiction_velocity > 0.0) {
            return Err(Error::Config("invalid contact parameters".into()));
        }
        let g = geometry.gap();
        let top = geometry.top();
        let floor = geometry.floor();
        let e = geometry.extent;
        let c = geometry.chamfer;
        let thickness = 0.05;
        let (left, right) = if c > 0.0 {
            (
                vec![[-e, floor], [-g, floor], [-g, top - c], [-g - c, top], [-e, top]],
                vec![[g, floor], [e, floor], [e, top], [g + c, top], [g, top - c]],
            )
        } else {
            (
                vec![[-e, floor], [-g, floor], [-g, top], [-e, top]],
                vec![[g, floor], [e, floor], [e, top], [g, top]],
            )
        };
        let walls = vec![
            Polygon::new(vec![[-e, floor - thickness], [e, floor - thickness], [e, floor], [-e, floor]]),
            Polygon::new(left),
            Polygon::new(right),
        ];
        Ok(BlockInsertionPlant {
            geometry,
            contact,
            walls,
        })
    }

    pub fn walls(&self) -> &[Polygon] {
        &self.walls
    }

    /// Goal position: block centred on the slot floor.
    pub fn x_ref(&self) -> DVector<f64> {
        DVector::zeros(2)
    }

    pub fn contacts(&self, x: &DVector<f64>) -> Vec<Contact> {
        let center = Vector2::new(x[0], x[1]);
        self.walls
            .iter()
            .filter_map(|w| square_penetration(&center, self.geometry.half_width, w))
            .collect()
    }

    /// Energy stored in the penalty springs, `Σ ½ k_c δ²`.
    pub fn elastic_energy(&self, x: &DVector<f64>) -> f64 {
        self.contacts(x)
            .iter()
            .map(|c| 0.5 * self.contact.stiffness * c.depth * c.depth)
            .sum()
    }

    /// How far the block bottom sits below the shoulder surface.
    pub fn insertion_depth(&self, x: &DVector<f64>) -> f64 {
        self.geometry.top() - (x[1] - self.geometry.half_width)
    }

    fn force(&self, x: &DVector<f64>, v: &DVector<f64>, step: Option<f64>) -> DVector<f64> {
        let vel = Vector2::new(v[0], v[1]);
        let p = &self.contact;
        let mut total = Vector2::zeros();
        for c in self.contacts(x) {
            let rate = -c.normal.dot(&vel);
            let fn_mag = (p.stiffness * c.depth + p.damping * rate).max(0.0);
            let tangent = Vector2::new(-c.normal.y, c.normal.x);
            let vt = tangent.dot(&vel);
            let mut ft = p.friction * fn_mag * (vt.abs() / p.stiction_velocity).min(1.0);
            if let Some(h) = step {
                // friction alone never reverses the sliding direction within one step
                ft = ft.min(self.geometry.mass * vt.abs() / h);
            }
            if vt != 0.0 {
                total -= tangent * ft.copysign(vt);
            }
            total += c.normal * fn_mag;
        }
        DVector::from_vec(vec![total.x, total.y])
    }

    /// Draws a start position at rest from the truncated Gaussian initial
    /// distribution. Samples overlapping a wall, outside the shoulders, or
    /// above the ceiling are rejected.
    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> PlantState {
        let g = &self.geometry;
        let nx = Normal::new(g.start_mean[0], g.start_std[0]).unwrap();
        let ny = Normal::new(g.start_mean[1], g.start_std[1]).unwrap();
        let min_y = g.top() + g.half_width + 0.005;
        let max_x = g.extent - g.half_width;
        loop {
            let x = nx.sample(rng);
            let y = ny.sample(rng);
            if y >= min_y && y <= g.start_ceiling && x.abs() <= max_x {
                return PlantState::at_rest(DVector::from_vec(vec![x, y]));
            }
        }
    }
}

impl BlockInsertionPlant {
    /// Fixed evaluation starts: the distribution mean and one standard
    /// deviation either side along each axis, clamped to the admissible
    /// region.
    pub fn eval_starts(&self) -> Vec<PlantState> {
        let g = &self.geometry;
        let min_y = g.top() + g.half_width + 0.005;
        let max_x = g.extent - g.half_width;
        let [mx, my] = g.start_mean;
        let [sx, sy] = g.start_std;
        [(mx, my), (mx - sx, my), (mx + sx, my), (mx, my - sy), (mx, my + sy)]
            .into_iter()
            .map(|(x, y)| {
                let x = x.clamp(-max_x, max_x);
                let y = y.clamp(min_y, g.start_ceiling.max(min_y));
                PlantState::at_rest(DVector::from_vec(vec![x, y]))
            })
            .collect()
    }
}

/// Net contact force on the block.
pub fn block_contact_force(plant: &BlockInsertionPlant, state: &PlantState) -> DVector<f64> {
    plant.force(&state.x, &state.xdot, None)
}

impl PlantModel for BlockInsertionPlant {
    fn dim(&self) -> usize {
        2
    }

    fn mass_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.geometry.mass
    }

    fn coriolis(&self, _x: &DVector<f64>, _xdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }

    fn external_force(&self, x: &DVector<f64>, xdot: &DVector<f64>) -> DVector<f64> {
        self.force(x, xdot, None)
    }

    fn external_force_discrete(&self, x: &DVector<f64>, xdot: &DVector<f64>, h: f64) -> DVector<f64> {
        self.force(x, xdot, Some(h))
    }

    fn is_success(&self, state: &PlantState) -> bool {
        self.insertion_depth(&state.x) >= self.geometry.success_depth && state.x[0].abs() < self.geometry.gap()
    }

    fn elastic_energy(&self, x: &DVector<f64>) -> f64 {
        BlockInsertionPlant::elastic_energy(self, x)
    }

    fn name(&self) -> &'static str {
        "block2d"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(x: f64, y: f64, vx: f64, vy: f64) -> PlantState {
        PlantState::from_slices(&[x, y], &[vx, vy]).unwrap()
    }

    #[test]
    fn free_space_has_no_force() {
        let plant = BlockInsertionPlant::default();
        let f = block_contact_force(&plant, &state(0.0, 0.3, 0.2, -0.1));
        assert_eq!(f, DVector::zeros(2));
        let f = block_contact_force(&plant, &state(0.0, 0.01, 0.0, 0.0));
        assert_eq!(f, DVector::zeros(2));
    }

    #[test]
    fn side_wall_penalty() {
        let plant = BlockInsertionPlant::default();
        // 1 mm into the right slot wall: block right face at gap + 1 mm.
        let g = plant.geometry.gap();
        let x = g + 0.001 - plant.geometry.half_width;
        let f = block_contact_force(&plant, &state(x, 0.0, 0.0, 0.0));
        assert!((f[0] + 100.0).abs() < 1e-6, "{f}");
        assert!(f[1].abs() < 1e-9);
    }

    #[test]
    fn normal_force_never_pulls() {
        let plant = BlockInsertionPlant::default();
        // Leaving the floor fast: damping would pull, clamp keeps it at zero.
        let f = block_contact_force(&plant, &state(0.0, -1e-5, 0.0, 10.0));
        assert_eq!(f[1], 0.0);
        let f = block_contact_force(&plant, &state(0.0, -1e-5, 0.0, 0.0));
        assert!(f[1] > 0.0);
    }

    #[test]
    fn friction_opposes_sliding() {
        let plant = BlockInsertionPlant::default();
        let y = plant.geometry.top() + plant.geometry.half_width - 1e-4;
        let f = block_contact_force(&plant, &state(0.2, y, 0.5, 0.0));
        assert!((f[1] - 10.0).abs() < 1e-9);
        assert!((f[0] + 3.0).abs() < 1e-9);
        let slow = block_contact_force(&plant, &state(0.2, y, 0.5e-4, 0.0));
        assert!((slow[0] + 1.5).abs() < 1e-9);
    }

    #[test]
    fn chamfer_pushes_toward_slot() {
        let plant = BlockInsertionPlant::default();
        let g = &plant.geometry;
        // Block's lower-right corner resting on the right chamfer.
        let cx = g.gap() + g.chamfer / 2.0 - g.half_width;
        let cy = g.top() - g.chamfer / 2.0 + g.half_width - 1e-4;
        let f = block_contact_force(&plant, &state(cx, cy, 0.0, 0.0));
        assert!(f[0] < 0.0 && f[1] > 0.0, "{f}");
        let c = plant.contacts(&DVector::from_vec(vec![cx, cy]));
        assert_eq!(c.len(), 1);
        assert!((c[0].normal.x + c[0].normal.y).abs() < 1e-12);
    }

    #[test]
    fn starts_are_collision_free() {
        let plant = BlockInsertionPlant::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let s = plant.sample_start(&mut rng);
            assert!(plant.contacts(&s.x).is_empty());
            assert!(!plant.is_success(&s));
        }
        let fixed = plant.eval_starts();
        assert_eq!(fixed.len(), 5);
        for s in fixed {
            assert!(plant.contacts(&s.x).is_empty());
        }
    }

    #[test]
    fn goal_counts_as_inserted() {
        let plant = BlockInsertionPlant::default();
        assert!(plant.is_success(&PlantState::at_rest(plant.x_ref())));
        assert!(plant.contacts(&plant.x_ref()).is_empty());
    }
}
