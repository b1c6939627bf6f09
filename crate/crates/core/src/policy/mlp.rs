//! Fully connected networks with hand-written batched backpropagation.
//!
//! Batches are column-major: one sample per column, so every layer is a
//! single matrix product.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Elu,
    Softplus,
    Linear,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Linear => z,
        }
    }

    /// Derivative from the pre-activation `z` and output `y`.
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => 1.0,
        }
    }
}

/// `y = act(W x + b)`, `W` is `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        Self {
            inputs: l.weights.ncols(),
            outputs: l.weights.nrows(),
            activation: l.activation,
            weights: l.weights.transpose().as_slice().to_vec(),
            bias: l.bias.as_slice().to_vec(),
        }
    }
}

impl TryFrom<LayerRepr> for Layer {
    type Error = String;

    fn try_from(r: LayerRepr) -> std::result::Result<Self, String> {
        if r.weights.len() != r.inputs * r.outputs || r.bias.len() != r.outputs {
            return Err(format!("layer {}x{} has mismatched buffers", r.outputs, r.inputs));
        }
        Ok(Self {
            weights: DMatrix::from_row_slice(r.outputs, r.inputs, &r.weights),
            bias: DVector::from_vec(r.bias),
            activation: r.activation,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer pre-activations and outputs of a batched forward pass.
pub struct ForwardCache {
    inputs: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.post.last().unwrap_or(&self.inputs)
    }
}

/// Hidden widths shared by the control and time networks.
pub const HIDDEN: [usize; 4] = [32, 64, 64, 32];

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(inputs: usize, widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if widths.len() != activations.len() || widths.is_empty() || inputs == 0 || widths.contains(&0) {
            return Err(Error::Config("one positive width per activation is required".into()));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = inputs;
        for (&out, &activation) in widths.iter().zip(activations) {
            let limit = (6.0 / (fan_in + out) as f64).sqrt();
            let weights = DMatrix::from_fn(out, fan_in, |_, _| rng.random_range(-limit..limit));
            layers.push(Layer { weights, bias: DVector::zeros(out), activation });
            fan_in = out;
        }
        Ok(Self { layers })
    }

    /// State-to-control network: tanh, tanh, elu, elu, linear output.
    pub fn control_net<R: Rng>(state_dim: usize, control_dim: usize, rng: &mut R) -> Result<Self> {
        use Activation::*;
        let mut widths = HIDDEN.to_vec();
        widths.push(control_dim);
        Self::new(state_dim, &widths, &[Tanh, Tanh, Elu, Elu, Linear], rng)
    }

    /// State-to-time network: elu hidden layers, softplus output.
    pub fn time_net<R: Rng>(state_dim: usize, rng: &mut R) -> Result<Self> {
        use Activation::*;
        let mut widths = HIDDEN.to_vec();
        widths.push(1);
        Self::new(state_dim, &widths, &[Elu, Elu, Elu, Elu, Softplus], rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Widths of every layer, input first.
    pub fn shape(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weights.nrows()))
            .collect()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = &l.weights * &h + &l.bias;
            z.apply(|v| *v = l.activation.apply(*v));
            h = z;
        }
        Ok(h)
    }

    /// Batched forward pass, one sample per column.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        for l in &self.layers {
            h = affine(l, &h);
            h.apply(|v| *v = l.activation.apply(*v));
        }
        h
    }

    pub fn forward_cached(&self, x: DMatrix<f64>) -> ForwardCache {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let z = affine(l, post.last().unwrap_or(&x));
            let y = z.map(|v| l.activation.apply(v));
            pre.push(z);
            post.push(y);
        }
        ForwardCache { inputs: x, pre, post }
    }

    /// Parameter gradient of `Σ_j upstream[:, j]·y[:, j]`, accumulated into
    /// `grad` (same layout as [`Mlp::flat`]).
    pub fn backward(&self, cache: &ForwardCache, upstream: &DMatrix<f64>, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.n_params());
        let offsets = self.offsets();
        let mut delta = upstream.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[i];
            let y = &cache.post[i];
            for ((d, &zv), &yv) in delta.iter_mut().zip(z.iter()).zip(y.iter()) {
                *d *= l.activation.derivative(zv, yv);
            }
            let input = if i == 0 { &cache.inputs } else { &cache.post[i - 1] };
            let (w_off, b_off) = offsets[i];
            let (rows, cols) = l.weights.shape();
            let gw = &delta * input.transpose();
            // Row-major flattening, matching the checkpoint layout.
            for r in 0..rows {
                for c in 0..cols {
                    grad[w_off + r * cols + c] += gw[(r, c)];
                }
            }
            for r in 0..rows {
                grad[b_off + r] += delta.row(r).sum();
            }
            if i > 0 {
                delta = l.weights.transpose() * &delta;
            }
        }
    }

    /// `(weight offset, bias offset)` of each layer in the flat layout.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = off;
                let b = w + l.weights.len();
                off = b + l.bias.len();
                (w, b)
            })
            .collect()
    }

    /// All parameters, layer by layer: row-major weights then bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weights.transpose().iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            let (rows, cols) = l.weights.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.weights[(r, c)] = it.next().unwrap_or_default();
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }
}

fn affine(l: &Layer, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &l.weights * x;
    for mut col in z.column_iter_mut() {
        col += &l.bias;
    }
    z
}

/// Per-coordinate affine normalization `(v − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Column statistics of `rows`; near-zero spreads are replaced by one.
    pub fn fit<'a, I>(rows: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::Contract("row width disagrees with standardizer".into()));
            }
            count += 1;
            for i in 0..dim {
                let d = row[i] - mean[i];
                mean[i] += d / count as f64;
                m2[i] += d * (row[i] - mean[i]);
            }
        }
        if count == 0 {
            return Err(Error::Contract("cannot standardize an empty set".into()));
        }
        let std = m2
            .iter()
            .map(|&s| {
                let sd = (s / count as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes every column in place.
    pub fn normalize(&self, m: &mut DMatrix<f64>) {
        for mut col in m.column_iter_mut() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
    }

    /// Inverse map applied to every column in place.
    pub fn denormalize(&self, m: &mut DMatrix<f64>) {
        for mut col in m.column_iter_mut() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = *v * self.std[i] + self.mean[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_matches_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::control_net(4, 2, &mut rng).unwrap();
        let x = DMatrix::from_fn(4, 5, |i, j| (i as f64 - j as f64) * 0.3);
        let batch = net.forward_batch(&x);
        for j in 0..5 {
            let single = net.forward(&x.column(j).into_owned()).unwrap();
            assert!((single - batch.column(j)).norm() < 1e-13);
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::time_net(6, &mut rng).unwrap();
        let mut copy = Mlp::time_net(6, &mut rng).unwrap();
        copy.set_flat(&net.flat()).unwrap();
        assert_eq!(copy, net);
        assert_eq!(net.shape(), vec![6, 32, 64, 64, 32, 1]);
    }

    #[test]
    fn wrong_input_width_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::control_net(4, 2, &mut rng).unwrap();
        assert!(matches!(net.forward(&DVector::zeros(3)), Err(Error::Contract(_))));
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(Activation::Softplus.apply(800.0), 800.0);
        assert!(Activation::Softplus.apply(-800.0) >= 0.0);
    }

    #[test]
    fn constant_column_keeps_unit_spread() {
        let rows = [[1.0, 2.0], [1.0, 4.0]];
        let s = Standardizer::fit(rows.iter().map(|r| &r[..]), 2).unwrap();
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.mean, vec![1.0, 3.0]);
        assert_eq!(s.std[1], 1.0);
    }
}
