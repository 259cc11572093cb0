//! Stacked affine coupling layers forming the bijection used by the
//! controller.
//!
//! Layer `k` keeps one block of coordinates fixed and maps the other block as
//! `x ⊙ exp(s(kept)) + t(kept)`. Even layers keep the leading block
//! `0..partition_index`, odd layers keep the trailing block, so each pair of
//! layers (a flow element) transforms every coordinate once.
//!
//! `s` and `t` are one-hidden-layer tanh networks. The raw output of `s` is
//! squashed to `(-SCALE_BOUND, SCALE_BOUND)` before exponentiation.
//!
//! # Flat parameter order
//!
//! Layer-major; within a layer `s_net` then `t_net`; within a network `W1`
//! (row-major, `n_h × in`), `b1`, `W2` (row-major, `out × n_h`), `b2`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Jet, Scalar, Tape, Var, MAX_DIM};
use crate::controller::{control_law, Gains};
use crate::error::{Error, Result};

/// Bound on the log-scale produced by each coupling layer.
pub const SCALE_BOUND: f64 = 3.0;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_WEIGHT_STD: f64 = 0.1;

/// One-hidden-layer dense network with tanh hidden units and linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

impl DenseNet {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        DenseNet {
            w1: vec![vec![0.0; input]; hidden],
            b1: vec![0.0; hidden],
            w2: vec![vec![0.0; hidden]; output],
            b2: vec![0.0; output],
        }
    }

    fn input_dim(&self) -> usize {
        self.w1.first().map_or(0, Vec::len)
    }

    fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    fn output_dim(&self) -> usize {
        self.b2.len()
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    fn check(&self) -> Result<()> {
        let (i, h, o) = self.shape();
        let ok = self.w1.len() == h
            && self.w1.iter().all(|r| r.len() == i)
            && self.w2.len() == o
            && self.w2.iter().all(|r| r.len() == h);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("ragged dense-net weights".into()))
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for row in &self.w1 {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.b1);
        for row in &self.w2 {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.b2);
    }

    fn fill_from(&mut self, values: &mut impl Iterator<Item = f64>) {
        for row in self.w1.iter_mut() {
            row.iter_mut().for_each(|w| *w = values.next().unwrap());
        }
        self.b1.iter_mut().for_each(|b| *b = values.next().unwrap());
        for row in self.w2.iter_mut() {
            row.iter_mut().for_each(|w| *w = values.next().unwrap());
        }
        self.b2.iter_mut().for_each(|b| *b = values.next().unwrap());
    }

    fn param_len(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + output * hidden + output
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayerParams {
    pub partition_index: usize,
    pub s_net: DenseNet,
    pub t_net: DenseNet,
}

/// All weights of the bijection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub dim: usize,
    pub n_flow: usize,
    pub n_h: usize,
    pub layers: Vec<CouplingLayerParams>,
}

/// Flat parameter vector in the documented order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

/// Partition index of flow element `element` for a `dim`-dimensional state.
pub fn default_partition(dim: usize, element: usize) -> usize {
    if element % 2 == 0 {
        dim / 2
    } else {
        dim - dim / 2
    }
}

/// Coordinates kept fixed by layer `layer` with partition `p`.
fn kept_range(layer: usize, p: usize, dim: usize) -> Range<usize> {
    if layer % 2 == 0 {
        0..p
    } else {
        p..dim
    }
}

fn transformed_range(layer: usize, p: usize, dim: usize) -> Range<usize> {
    if layer % 2 == 0 {
        p..dim
    } else {
        0..p
    }
}

impl FlowParams {
    /// All-zero networks: every layer is the identity map.
    pub fn identity(dim: usize, n_flow: usize, n_h: usize) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        let mut layers = Vec::with_capacity(2 * n_flow);
        for element in 0..n_flow {
            let p = default_partition(dim, element);
            for half in 0..2 {
                let k = 2 * element + half;
                let input = kept_range(k, p, dim).len();
                let output = dim - input;
                layers.push(CouplingLayerParams {
                    partition_index: p,
                    s_net: DenseNet::zeros(input, n_h, output),
                    t_net: DenseNet::zeros(input, n_h, output),
                });
            }
        }
        Ok(FlowParams {
            dim,
            n_flow,
            n_h,
            layers,
        })
    }

    /// Gaussian weights (std [`INIT_WEIGHT_STD`]) and zero biases.
    pub fn random<R: Rng + ?Sized>(dim: usize, n_flow: usize, n_h: usize, rng: &mut R) -> Result<Self> {
        let mut flow = Self::identity(dim, n_flow, n_h)?;
        let normal = Normal::new(0.0, INIT_WEIGHT_STD).unwrap();
        for layer in &mut flow.layers {
            for net in [&mut layer.s_net, &mut layer.t_net] {
                for w in net.w1.iter_mut().chain(net.w2.iter_mut()).flatten() {
                    *w = normal.sample(rng);
                }
            }
        }
        Ok(flow)
    }

    /// Every weight and bias drawn uniformly from `[-bound, bound]`.
    pub fn random_uniform<R: Rng + ?Sized>(
        dim: usize,
        n_flow: usize,
        n_h: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let flow = Self::identity(dim, n_flow, n_h)?;
        let n = flow.num_params();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        flow.with_params(&values)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (i, h, o) = l.s_net.shape();
                2 * DenseNet::param_len(i, h, o)
            })
            .sum()
    }

    pub fn to_param_vector(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            layer.s_net.flatten_into(&mut out);
            layer.t_net.flatten_into(&mut out);
        }
        ParamVector(out)
    }

    /// Copy of `self` with weights replaced by `values` (flat order).
    pub fn with_params(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} flow parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut out = self.clone();
        let mut it = values.iter().copied();
        for layer in &mut out.layers {
            layer.s_net.fill_from(&mut it);
            layer.t_net.fill_from(&mut it);
        }
        Ok(out)
    }

    /// Checks shape consistency of every layer against `dim`.
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_DIM).contains(&self.dim) {
            return Err(Error::UnsupportedDimension(self.dim));
        }
        if self.layers.len() != 2 * self.n_flow {
            return Err(Error::Shape(format!(
                "{} layers for n_flow = {}",
                self.layers.len(),
                self.n_flow
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let p = layer.partition_index;
            if p == 0 || p >= self.dim {
                return Err(Error::Shape(format!("layer {k}: partition index {p} outside 1..{}", self.dim)));
            }
            if k % 2 == 1 && p != self.layers[k - 1].partition_index {
                return Err(Error::Shape(format!("layer {k}: partition differs from its pair")));
            }
            layer.s_net.check()?;
            layer.t_net.check()?;
            let expect = (kept_range(k, p, self.dim).len(), self.n_h, self.dim - kept_range(k, p, self.dim).len());
            if layer.s_net.shape() != expect || layer.t_net.shape() != expect {
                return Err(Error::Shape(format!(
                    "layer {k}: network shape {:?}/{:?}, expected {expect:?}",
                    layer.s_net.shape(),
                    layer.t_net.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let flow: FlowParams = serde_json::from_str(text)?;
        flow.validate()?;
        Ok(flow)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("input of length {} for a {}-d flow", x.len(), self.dim)));
        }
        Ok(())
    }
}

/// Evaluates `s` and `t` of one layer on the kept coordinates.
///
/// `theta(i)` returns flat parameter `i`; `offset` is where this layer starts.
fn layer_nets<T: Scalar>(
    kept: &[T],
    out_dim: usize,
    n_h: usize,
    theta: &impl Fn(usize) -> T,
    offset: usize,
) -> (Vec<T>, Vec<T>) {
    let in_dim = kept.len();
    let net_len = DenseNet::param_len(in_dim, n_h, out_dim);
    let eval = |base: usize| -> Vec<T> {
        let mut hidden = Vec::with_capacity(n_h);
        let b1 = base + n_h * in_dim;
        for j in 0..n_h {
            let mut acc = theta(b1 + j);
            for (i, k) in kept.iter().enumerate() {
                acc = acc + theta(base + j * in_dim + i) * *k;
            }
            hidden.push(acc.tanh());
        }
        let w2 = b1 + n_h;
        let b2 = w2 + out_dim * n_h;
        (0..out_dim)
            .map(|o| {
                let mut acc = theta(b2 + o);
                for (j, h) in hidden.iter().enumerate() {
                    acc = acc + theta(w2 + o * n_h + j) * *h;
                }
                acc
            })
            .collect()
    };
    let s = eval(offset)
        .into_iter()
        .map(|raw| raw.scale(1.0 / SCALE_BOUND).tanh().scale(SCALE_BOUND))
        .collect();
    let t = eval(offset + net_len);
    (s, t)
}

/// Forward pass over any scalar type.
pub(crate) fn forward_generic<T: Scalar>(
    flow: &FlowParams,
    theta: impl Fn(usize) -> T,
    x: &[T],
) -> Result<Vec<T>> {
    let dim = flow.dim;
    let mut state = x.to_vec();
    let mut offset = 0;
    for (k, layer) in flow.layers.iter().enumerate() {
        let p = layer.partition_index;
        let kept_idx = kept_range(k, p, dim);
        let trans_idx = transformed_range(k, p, dim);
        let kept: Vec<T> = state[kept_idx.clone()].to_vec();
        let (s, t) = layer_nets(&kept, trans_idx.len(), flow.n_h, &theta, offset);
        for (j, idx) in trans_idx.clone().enumerate() {
            state[idx] = state[idx] * s[j].exp() + t[j];
        }
        if state.iter().any(|v| !v.value().is_finite()) {
            return Err(Error::NonFiniteLayer {
                layer: k,
                what: "forward activation".into(),
            });
        }
        offset += 2 * DenseNet::param_len(kept_idx.len(), flow.n_h, trans_idx.len());
    }
    Ok(state)
}

/// `y = φ(x)`.
pub fn flow_forward(flow: &FlowParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    flow.check_input(x.as_slice())?;
    let theta = flow.to_param_vector().0;
    let y = forward_generic(flow, |i| theta[i], x.as_slice())?;
    Ok(DVector::from_vec(y))
}

/// `x = φ⁻¹(y)`, peeling layers in reverse order.
pub fn flow_inverse(flow: &FlowParams, y: &DVector<f64>) -> Result<DVector<f64>> {
    flow.check_input(y.as_slice())?;
    let dim = flow.dim;
    let theta = flow.to_param_vector().0;
    let mut offsets = Vec::with_capacity(flow.layers.len());
    let mut offset = 0;
    for (k, layer) in flow.layers.iter().enumerate() {
        offsets.push(offset);
        let kept = kept_range(k, layer.partition_index, dim).len();
        offset += 2 * DenseNet::param_len(kept, flow.n_h, dim - kept);
    }
    let mut state: Vec<f64> = y.iter().copied().collect();
    for (k, layer) in flow.layers.iter().enumerate().rev() {
        let p = layer.partition_index;
        let kept: Vec<f64> = state[kept_range(k, p, dim)].to_vec();
        let trans_idx = transformed_range(k, p, dim);
        let (s, t) = layer_nets(&kept, trans_idx.len(), flow.n_h, &|i| theta[i], offsets[k]);
        for (j, idx) in trans_idx.enumerate() {
            state[idx] = (state[idx] - t[j]) * (-s[j]).exp();
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLayer {
                layer: k,
                what: "inverse activation".into(),
            });
        }
    }
    Ok(DVector::from_vec(state))
}

/// `φ(x)` together with `J(x) = ∂φ/∂x`.
pub fn flow_forward_with_jacobian(flow: &FlowParams, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    flow.check_input(x.as_slice())?;
    let dim = flow.dim;
    let theta = flow.to_param_vector().0;
    let seeds: Vec<Jet<f64>> = (0..dim).map(|i| Jet::seed(x[i], i, dim)).collect();
    let y = forward_generic(flow, |i| Jet::constant(theta[i]), &seeds)?;
    let value = DVector::from_iterator(dim, y.iter().map(|j| j.v));
    let jac = DMatrix::from_fn(dim, dim, |r, c| y[r].deriv(c));
    Ok((value, jac))
}

pub fn flow_jacobian(flow: &FlowParams, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(flow_forward_with_jacobian(flow, x)?.1)
}

/// Controller output and its exact derivative with respect to every flow
/// parameter.
///
/// The flow is evaluated on `Jet<Var>` inputs: the jets carry `J(x)` while the
/// tape records how each entry of `φ` and `J` depends on the weights. One
/// reverse sweep per output component produces a row of `du_dtheta`.
pub fn grad_through_flow(
    flow: &FlowParams,
    x: &DVector<f64>,
    xdot: &DVector<f64>,
    x_ref: &DVector<f64>,
    gains: &Gains,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = flow.dim;
    flow.check_input(x.as_slice())?;
    flow.check_input(xdot.as_slice())?;
    flow.check_input(x_ref.as_slice())?;
    gains.check_dim(dim)?;
    let theta = flow.to_param_vector().0;
    let p = theta.len();
    let tape = Tape::with_capacity(64 * p);
    let leaves: Vec<Var> = theta.iter().map(|&w| tape.var(w)).collect();

    let seeds: Vec<Jet<Var>> = (0..dim).map(|i| Jet::seed(Var::constant(x[i]), i, dim)).collect();
    let y = forward_generic(flow, |i| Jet::constant(leaves[i]), &seeds)?;
    let refs: Vec<Var> = x_ref.iter().map(|&v| Var::constant(v)).collect();
    let y_ref = forward_generic(flow, |i| leaves[i], &refs)?;

    let jac: Vec<Vec<Var>> = (0..dim).map(|r| (0..dim).map(|c| y[r].deriv(c)).collect()).collect();
    let dphi: Vec<Var> = (0..dim).map(|r| y[r].v - y_ref[r]).collect();
    let vel: Vec<Var> = xdot.iter().map(|&v| Var::constant(v)).collect();
    let u = control_law(&jac, &dphi, &vel, &gains.stiffness, &gains.damping);

    let mut du = DMatrix::zeros(dim, p);
    let mut adj = Vec::new();
    for (r, ur) in u.iter().enumerate() {
        if !ur.value().is_finite() {
            return Err(Error::NonFinite(format!("controller output component {r}")));
        }
        tape.backward_into(*ur, &mut adj);
        for (c, leaf) in leaves.iter().enumerate() {
            du[(r, c)] = leaf.index().map_or(0.0, |i| adj[i]);
        }
    }
    if du.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    let u = DVector::from_iterator(dim, u.iter().map(|v| v.value()));
    Ok((u, du))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer_constant(s: f64, t: f64) -> FlowParams {
        // One layer keeping x1 and transforming x2 with constant s, t.
        let mut flow = FlowParams::identity(2, 1, 3).unwrap();
        flow.layers.truncate(1);
        flow.n_flow = 1;
        flow.layers[0].s_net.b2[0] = SCALE_BOUND * (s / SCALE_BOUND).atanh();
        flow.layers[0].t_net.b2[0] = t;
        flow
    }

    #[test]
    fn zero_weights_are_identity() {
        let flow = FlowParams::identity(2, 2, 8).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(flow_forward(&flow, &x).unwrap(), x);
        assert_eq!(flow_jacobian(&flow, &x).unwrap(), DMatrix::identity(2, 2));
        let y = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(flow_inverse(&flow, &y).unwrap(), y);
    }

    #[test]
    fn single_constant_layer_closed_form() {
        let flow = single_layer_constant(0.5, 1.0);
        let x = DVector::from_vec(vec![2.0, 3.0]);
        let y = flow_forward(&flow, &x).unwrap();
        let expect = 3.0 * 0.5f64.exp() + 1.0;
        assert_eq!(y[0], 2.0);
        assert!((y[1] - expect).abs() < 1e-12);

        let back = flow_inverse(&flow, &DVector::from_vec(vec![2.0, expect])).unwrap();
        assert!((back[0] - 2.0).abs() < 1e-12 && (back[1] - 3.0).abs() < 1e-12);

        let j = flow_jacobian(&flow, &x).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(j[(0, 1)].abs() < 1e-15);
        assert!(j[(1, 0)].abs() < 1e-12);
        assert!((j[(1, 1)] - 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn seeded_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let flow = FlowParams::random_uniform(2, 2, 8, 1.0, &mut rng).unwrap();
        let x = DVector::from_vec(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        let y = flow_forward(&flow, &x).unwrap();
        let back = flow_inverse(&flow, &y).unwrap();
        assert!((back - x).amax() < 1e-9);
    }

    #[test]
    fn param_vector_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flow = FlowParams::random_uniform(3, 2, 4, 1.0, &mut rng).unwrap();
        let flat = flow.to_param_vector();
        assert_eq!(flat.0.len(), flow.num_params());
        assert_eq!(flow.with_params(&flat.0).unwrap(), flow);
    }

    #[test]
    fn param_count_matches_layout() {
        // d = 2: every net is 1 -> n_h -> 1: 3 n_h + 1 weights.
        let flow = FlowParams::identity(2, 2, 8).unwrap();
        assert_eq!(flow.num_params(), 4 * 2 * 25);
        // d = 3 alternates partitions 1 and 2.
        let flow3 = FlowParams::identity(3, 2, 4).unwrap();
        let parts: Vec<usize> = flow3.layers.iter().map(|l| l.partition_index).collect();
        assert_eq!(parts, vec![1, 1, 2, 2]);
        flow3.validate().unwrap();
    }

    #[test]
    fn flat_order_starts_with_first_w1() {
        let mut flow = FlowParams::identity(2, 1, 2).unwrap();
        flow.layers[0].s_net.w1[1][0] = 7.0;
        flow.layers[0].s_net.b1[0] = 8.0;
        flow.layers[0].t_net.w1[0][0] = 9.0;
        let flat = flow.to_param_vector().0;
        assert_eq!(flat[1], 7.0);
        assert_eq!(flat[2], 8.0);
        assert_eq!(flat[7], 9.0);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let flow = FlowParams::identity(2, 1, 2).unwrap();
        let err = flow_forward(&flow, &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(matches!(FlowParams::identity(1, 1, 2), Err(Error::UnsupportedDimension(1))));
    }

    #[test]
    fn validate_rejects_bad_partition() {
        let mut flow = FlowParams::identity(2, 1, 2).unwrap();
        flow.layers[1].partition_index = 2;
        assert!(flow.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let flow = FlowParams::random(2, 2, 8, &mut rng).unwrap();
        let text = flow.to_json().unwrap();
        assert!(text.contains("\"W1\""));
        assert_eq!(FlowParams::from_json(&text).unwrap(), flow);
    }

    #[test]
    fn forward_reports_layer_of_overflow() {
        let mut flow = FlowParams::identity(2, 2, 2).unwrap();
        flow.layers[2].t_net.b2[0] = f64::INFINITY;
        let err = flow_forward(&flow, &DVector::from_vec(vec![0.1, 0.2])).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLayer { layer: 2, .. }));
    }
}
