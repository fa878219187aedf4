//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector so optimizers and checkpoints can treat
//! every network uniformly. Layer `l` owns a row-major `d_out x d_in` weight
//! block followed by its `d_out` biases. Hidden layers apply an activation;
//! the output layer is always affine.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
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

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Intermediate values of one forward pass, needed by [`Mlp::backward_with`].
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the network output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    hidden_activations: Vec<Activation>,
    params: Vec<f64>,
    seed: u64,
    recorded: Option<Trace>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims
            && self.hidden_activations == other.hidden_activations
            && self.params == other.params
    }
}

pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// Builds a network with weights and biases drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, deterministic in `seed`.
    pub fn new(layer_dims: &[usize], hidden_activations: &[Activation], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::invalid(format!(
                "layer_dims must list at least two positive sizes, got {layer_dims:?}"
            )));
        }
        if hidden_activations.len() != layer_dims.len() - 2 {
            return Err(Error::DimensionMismatch {
                context: "hidden activations",
                expected: layer_dims.len() - 2,
                got: hidden_activations.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(layer_dims));
        for w in layer_dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            hidden_activations: hidden_activations.to_vec(),
            params,
            seed,
            recorded: None,
        })
    }

    /// Same as [`Mlp::new`] with one activation shared by every hidden layer.
    pub fn uniform(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let hidden = vec![activation; layer_dims.len().saturating_sub(2)];
        Mlp::new(layer_dims, &hidden, seed)
    }

    pub fn from_params(
        layer_dims: &[usize],
        hidden_activations: &[Activation],
        params: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Mlp::new(layer_dims, hidden_activations, seed)?;
        net.set_params(&params)?;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn hidden_activations(&self) -> &[Activation] {
        &self.hidden_activations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "mlp parameters",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        self.recorded = None;
        Ok(())
    }

    /// Zeroes the weights and biases of the output layer, so the network
    /// initially outputs exactly zero while hidden layers keep their init.
    pub fn zero_output_layer(&mut self) {
        let n = self.layer_dims.len();
        let last = (self.layer_dims[n - 2] + 1) * self.layer_dims[n - 1];
        let total = self.params.len();
        self.params[total - last..].iter_mut().for_each(|p| *p = 0.0);
    }

    /// Sets the output-layer biases.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "output bias",
                expected: self.output_dim(),
                got: bias.len(),
            });
        }
        let total = self.params.len();
        self.params[total - bias.len()..].copy_from_slice(bias);
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        let mut offset = 0;
        let layers = self.layer_dims.len() - 1;
        for l in 0..layers {
            let (d_in, d_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let mut next = self.affine(offset, d_in, d_out, &current);
            offset += (d_in + 1) * d_out;
            if l + 1 < layers {
                let act = self.hidden_activations[l];
                next.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            current = next;
        }
        Ok(current)
    }

    fn affine(&self, offset: usize, d_in: usize, d_out: usize, x: &[f64]) -> Vec<f64> {
        let weights = &self.params[offset..offset + d_in * d_out];
        let bias = &self.params[offset + d_in * d_out..offset + (d_in + 1) * d_out];
        weights
            .chunks_exact(d_in)
            .zip(bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    /// Forward pass that keeps every intermediate needed for backpropagation.
    /// `trace` is overwritten, allowing its buffers to be reused between calls.
    pub fn forward_into(&self, input: &[f64], trace: &mut Trace) -> Result<()> {
        self.check_input(input)?;
        let layers = self.layer_dims.len() - 1;
        trace.inputs.resize_with(layers + 1, Vec::new);
        trace.pre.resize_with(layers.saturating_sub(1), Vec::new);
        trace.inputs[0].clear();
        trace.inputs[0].extend_from_slice(input);
        let mut offset = 0;
        for l in 0..layers {
            let (d_in, d_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let weights = &self.params[offset..offset + d_in * d_out];
            let bias = &self.params[offset + d_in * d_out..offset + (d_in + 1) * d_out];
            offset += (d_in + 1) * d_out;
            let (before, after) = trace.inputs.split_at_mut(l + 1);
            let x = &before[l];
            let out = &mut after[0];
            out.clear();
            out.extend(
                weights
                    .chunks_exact(d_in)
                    .zip(bias)
                    .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()),
            );
            if l + 1 < layers {
                trace.pre[l].clear();
                trace.pre[l].extend_from_slice(out);
                let act = self.hidden_activations[l];
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(())
    }

    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        let mut trace = Trace::default();
        self.forward_into(input, &mut trace)?;
        Ok(trace)
    }

    /// Forward pass whose trace is kept on the network for a later [`Mlp::backward`].
    pub fn forward_recorded(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(input)?;
        let out = trace.output().to_vec();
        self.recorded = Some(trace);
        Ok(out)
    }

    /// Gradient of the loss with respect to all parameters, given the loss
    /// gradient at the output of the most recent [`Mlp::forward_recorded`].
    pub fn backward(&self, output_grad: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.recorded.clone().ok_or(Error::NoForwardPass)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward_with(&mut trace, output_grad, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Accumulates `scale * d(output_grad . output)/d(params)` into `grad`.
    pub fn backward_with(
        &self,
        trace: &mut Trace,
        output_grad: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let layers = self.layer_dims.len() - 1;
        if trace.inputs.len() != layers + 1 {
            return Err(Error::NoForwardPass);
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "output gradient",
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient buffer",
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let Trace {
            inputs,
            pre,
            delta,
            delta_prev,
        } = trace;
        delta.clear();
        delta.extend(output_grad.iter().map(|g| g * scale));
        let mut end = self.params.len();
        for l in (0..layers).rev() {
            let (d_in, d_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let start = end - (d_in + 1) * d_out;
            let x = &inputs[l];
            {
                let (gw, gb) = grad[start..end].split_at_mut(d_in * d_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * d_in..(o + 1) * d_in];
                    row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                }
            }
            if l > 0 {
                let weights = &self.params[start..start + d_in * d_out];
                delta_prev.clear();
                delta_prev.resize(d_in, 0.0);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &weights[o * d_in..(o + 1) * d_in];
                    delta_prev.iter_mut().zip(row).for_each(|(dp, w)| *dp += d * w);
                }
                let act = self.hidden_activations[l - 1];
                for ((dp, &z), &y) in delta_prev.iter_mut().zip(&pre[l - 1]).zip(x) {
                    *dp *= act.derivative(z, y);
                }
                std::mem::swap(delta, delta_prev);
            }
            end = start;
        }
        Ok(())
    }
}
