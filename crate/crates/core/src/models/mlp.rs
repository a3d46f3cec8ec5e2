//! Fully connected tanh network over a flat parameter slice.
//!
//! Layer `l` stores its weight matrix row-major (`out × in`) followed by its
//! bias. Hidden layers apply `tanh`; the output layer is affine.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// Optional per-input divisor applied before the first layer.
    input_scale: Option<Vec<f64>>,
}

/// Post-activation values of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    activations: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output layer")
    }
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self {
            sizes,
            input_scale: None,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn input_scale(&self) -> Option<&[f64]> {
        self.input_scale.as_deref()
    }

    pub fn set_input_scale(&mut self, scale: Option<Vec<f64>>) {
        debug_assert!(scale.as_ref().is_none_or(|s| s.len() == self.input_dim()));
        self.input_scale = scale;
    }

    /// `Σ (in·out + out)` over layers.
    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of each layer's block in the flat parameter vector.
    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    /// Uniform draws in `±1/√fan_in` for weights and biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.n_params());
        for (_, fan_in, fan_out) in self.layer_offsets() {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        params
    }

    /// Range of the final layer's bias in the flat parameter vector.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let total = self.n_params();
        total - self.output_dim()..total
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.trace(params, x).activations.pop().unwrap()
    }

    pub fn trace(&self, params: &[f64], x: &[f64]) -> MlpTrace {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(x.len(), self.input_dim());
        let input = match &self.input_scale {
            Some(scale) => x.iter().zip(scale).map(|(v, s)| v / s).collect(),
            None => x.to_vec(),
        };
        let n_layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input);
        for (l, (start, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let prev = &activations[l];
            let w = &params[start..start + fan_in * fan_out];
            let b = &params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
            let hidden = l + 1 < n_layers;
            let next: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = b[o] + row.iter().zip(prev).map(|(a, v)| a * v).sum::<f64>();
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            activations.push(next);
        }
        MlpTrace { activations }
    }

    /// Accumulates `(∂out/∂θ)ᵀ · dout` into `grad`.
    pub fn backward(&self, params: &[f64], trace: &MlpTrace, dout: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.n_params());
        let layers: Vec<_> = self.layer_offsets().collect();
        let n_layers = layers.len();
        let mut delta = dout.to_vec();
        for l in (0..n_layers).rev() {
            let (start, fan_in, fan_out) = layers[l];
            let prev = &trace.activations[l];
            let w_end = start + fan_in * fan_out;
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[start + o * fan_in..start + (o + 1) * fan_in];
                for (g, v) in row.iter_mut().zip(prev) {
                    *g += d * v;
                }
                grad[w_end + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &params[start..w_end];
            delta = (0..fan_in)
                .map(|k| {
                    let back: f64 = (0..fan_out).map(|o| w[o * fan_in + k] * delta[o]).sum();
                    back * (1.0 - prev[k] * prev[k])
                })
                .collect();
        }
    }
}
