use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected network with tanh hidden layers and a linear output.
///
/// Parameters are stored flat, layer by layer: the row-major weight matrix
/// (`out × in`) followed by the bias vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Layer inputs recorded by a forward pass: the network input followed by
/// each hidden activation.
#[derive(Clone, Debug, Default)]
pub struct Activations(Vec<Vec<f64>>);

fn count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; count(sizes)],
        })
    }

    /// Weights drawn from `N(0, 1/fan_in)`, the output layer additionally
    /// scaled by `out_scale`; zero biases.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let layers = sizes.len() - 1;
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut std = 1.0 / (fan_in as f64).sqrt();
            if l + 1 == layers {
                std *= out_scale;
            }
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = normal.sample(rng);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) || self.params.len() != count(&self.sizes) {
            return Err(Error::Shape(format!(
                "network with sizes {:?} has {} parameters",
                self.sizes,
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).0
    }

    pub fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, Activations) {
        assert_eq!(input.len(), self.input_dim(), "network input size");
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers);
        let mut a = input.to_vec();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut z: Vec<f64> = bias.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &weights[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
            }
            if l + 1 < layers {
                for zo in &mut z {
                    *zo = zo.tanh();
                }
            }
            acts.push(std::mem::replace(&mut a, z));
            off += n_in * n_out + n_out;
        }
        (a, Activations(acts))
    }

    /// Adds `(∂out/∂params)ᵀ grad_out` into `grad`.
    pub fn backward(&self, acts: &Activations, grad_out: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let a = &acts.0[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (g, x) in row.iter_mut().zip(a) {
                        *g += d * x;
                    }
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &self.params[off..off + n_in * n_out];
                let prev: Vec<f64> = (0..n_in)
                    .map(|i| {
                        let s: f64 = (0..n_out).map(|o| weights[o * n_in + i] * delta[o]).sum();
                        s * (1.0 - a[i] * a[i])
                    })
                    .collect();
                delta = prev;
            }
        }
    }

    /// Index range of the output layer's weights and biases.
    pub(crate) fn output_layer(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let n = self.sizes.len();
        let (n_in, n_out) = (self.sizes[n - 2], self.sizes[n - 1]);
        let end = self.params.len();
        let b_start = end - n_out;
        (b_start - n_in * n_out..b_start, b_start..end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count() {
        let net = Mlp::zeros(&[4, 32, 32, 2]).unwrap();
        assert_eq!(net.num_params(), 4 * 32 + 32 + 32 * 32 + 32 + 32 * 2 + 2);
        assert!(Mlp::zeros(&[3]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::random(&[3, 5, 4, 2], 1.0, &mut rng).unwrap();
        let input = [0.3, -0.7, 1.1];
        let w = [0.8, -1.3];
        let (_, acts) = net.forward_cached(&input);
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&acts, &w, &mut grad);
        let h = 1e-6;
        for k in 0..net.num_params() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.params[k] += h;
            minus.params[k] -= h;
            let f = |n: &Mlp| n.forward(&input).iter().zip(&w).map(|(o, w)| o * w).sum::<f64>();
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn output_layer_ranges() {
        let net = Mlp::zeros(&[2, 3, 4]).unwrap();
        let (w, b) = net.output_layer();
        assert_eq!(w, 9..21);
        assert_eq!(b, 21..25);
    }
}
