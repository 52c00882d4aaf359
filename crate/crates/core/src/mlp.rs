//! Minimal dense feed-forward network with a flat parameter vector,
//! hand-written backprop, and an adaptive-moment optimizer.
//!
//! Both function approximators in the crate (the Q-network and the channel
//! network) are instances of [`Mlp`]. Parameters live in one contiguous
//! `Vec<f64>` laid out layer by layer (row-major weights, then biases), which
//! keeps optimizer state trivial and makes finite-difference checks easy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Reusable forward buffers (ping-pong pair), so hot paths run allocation-free.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Post-activation values of every layer (index 0 is the input), kept for
/// backprop.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    layers: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    pub params: Vec<f64>,
}

impl Mlp {
    /// Total parameter count for a layer-size chain: sum of
    /// `(fan_in + 1) * fan_out` over consecutive pairs.
    pub fn param_count(sizes: &[usize]) -> usize {
        sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Builds a network with weights drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` and zero biases.
    pub fn new<R: Rng>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Result<Mlp> {
        if sizes.len() < 2 {
            return Err(Error::usage("an MLP needs at least input and output sizes"));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(Error::usage(format!(
                "{} layer sizes need {} activations, got {}",
                sizes.len(),
                sizes.len() - 1,
                activations.len()
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::usage("layer sizes must be positive"));
        }
        let mut params = Vec::with_capacity(Self::param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-bound..=bound));
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Checks structural consistency (used after deserializing).
    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2
            || self.activations.len() != self.sizes.len() - 1
            || self.sizes.iter().any(|&s| s == 0)
        {
            return Err(Error::config("malformed network architecture"));
        }
        if self.params.len() != Self::param_count(&self.sizes) {
            return Err(Error::config(format!(
                "network has {} parameters, architecture needs {}",
                self.params.len(),
                Self::param_count(&self.sizes)
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("network parameters contain non-finite values"));
        }
        Ok(())
    }

    /// Runs the network, reusing `scratch`; returns the output slice.
    pub fn forward_scratch<'s>(&self, input: &[f64], scratch: &'s mut Scratch) -> &'s [f64] {
        debug_assert_eq!(input.len(), self.sizes[0]);
        scratch.a.clear();
        scratch.a.extend_from_slice(input);
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let act = self.activations[l];
            scratch.b.clear();
            scratch.b.reserve(n_out);
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let mut acc = biases[o];
                for (wi, xi) in row.iter().zip(scratch.a.iter()) {
                    acc += wi * xi;
                }
                scratch.b.push(act.apply(acc));
            }
            std::mem::swap(&mut scratch.a, &mut scratch.b);
        }
        &scratch.a
    }

    /// Allocating convenience wrapper around [`Mlp::forward_scratch`].
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut scratch = Scratch::default();
        self.forward_scratch(input, &mut scratch).to_vec()
    }

    /// Forward pass that records every layer's post-activation for backprop.
    pub fn forward_trace(&self, input: &[f64], trace: &mut ForwardTrace) {
        debug_assert_eq!(input.len(), self.sizes[0]);
        trace.layers.resize(self.sizes.len(), Vec::new());
        trace.layers[0].clear();
        trace.layers[0].extend_from_slice(input);
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            let act = self.activations[l];
            let (before, after) = trace.layers.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            y.clear();
            y.reserve(n_out);
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let mut acc = biases[o];
                for (wi, xi) in row.iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                y.push(act.apply(acc));
            }
        }
    }

    /// Output of the last [`Mlp::forward_trace`] call on this trace.
    pub fn trace_output<'t>(&self, trace: &'t ForwardTrace) -> &'t [f64] {
        trace.layers.last().unwrap()
    }

    /// Backpropagates `output_grad` (dL/dy at the network output) through the
    /// recorded trace, accumulating parameter gradients into `param_grad`.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &[f64], param_grad: &mut [f64]) {
        debug_assert_eq!(param_grad.len(), self.params.len());
        debug_assert_eq!(output_grad.len(), self.output_size());
        let n_layers = self.sizes.len() - 1;
        // delta = dL/d(pre-activation) of the current layer.
        let mut delta: Vec<f64> = trace.layers[n_layers]
            .iter()
            .zip(output_grad)
            .map(|(&y, &g)| g * self.activations[n_layers - 1].derivative_from_output(y))
            .collect();
        let mut next_delta: Vec<f64> = Vec::new();
        // Parameter offset of the current layer, walked backwards.
        let mut offsets: Vec<usize> = Vec::with_capacity(n_layers);
        let mut acc = 0;
        for w in self.sizes.windows(2) {
            offsets.push(acc);
            acc += (w[0] + 1) * w[1];
        }
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let offset = offsets[l];
            let x = &trace.layers[l];
            {
                let wg = &mut param_grad[offset..offset + n_in * n_out];
                for o in 0..n_out {
                    let d = delta[o];
                    let row = &mut wg[o * n_in..(o + 1) * n_in];
                    for (w, xi) in row.iter_mut().zip(x.iter()) {
                        *w += d * xi;
                    }
                }
            }
            {
                let bg =
                    &mut param_grad[offset + n_in * n_out..offset + (n_in + 1) * n_out];
                for (b, d) in bg.iter_mut().zip(delta.iter()) {
                    *b += d;
                }
            }
            if l > 0 {
                let weights = &self.params[offset..offset + n_in * n_out];
                next_delta.clear();
                next_delta.resize(n_in, 0.0);
                for o in 0..n_out {
                    let d = delta[o];
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    for (nd, w) in next_delta.iter_mut().zip(row.iter()) {
                        *nd += d * w;
                    }
                }
                let act = self.activations[l - 1];
                for (nd, &y) in next_delta.iter_mut().zip(x.iter()) {
                    *nd *= act.derivative_from_output(y);
                }
                std::mem::swap(&mut delta, &mut next_delta);
            }
        }
    }
}

/// Adaptive-moment first-order optimizer (decay 0.9 / 0.999, epsilon 1e-8)
/// with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n_params: usize) -> Adam {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step along `grad` at learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}
