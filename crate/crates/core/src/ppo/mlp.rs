//! Dense tanh networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector, layer after layer, each layer stored
//! as a row-major `out x in` weight block followed by its bias. The flat
//! layout makes optimizer updates, finite-difference checks and checkpoints
//! uniform.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Post-activation outputs of every layer for one input, input included.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Scaled-Gaussian initialization: weights `~ N(0, gain^2 / fan_in)` with
    /// the output layer scaled by `out_gain`, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = Vec::with_capacity(param_count(sizes));
        let n_layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if l + 1 == n_layers { out_gain } else { 1.0 };
            let scale = gain / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && param_count(&sizes) == params.len()).then_some(Self { sizes, params })
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

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).activations.pop().unwrap()
    }

    pub fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        debug_assert_eq!(x.len(), self.input_dim());
        let n_layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = &activations[l];
            let hidden = l + 1 < n_layers;
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = b[o] + dot(row, input);
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            activations.push(out);
            offset += fan_in * fan_out + fan_out;
        }
        ForwardCache { activations }
    }

    /// Accumulates `d_out^T * d(output)/d(params)` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_layers = self.sizes.len() - 1;
        let mut delta = d_out.to_vec();
        let mut offset = self.params.len();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= fan_in * fan_out + fan_out;
            let input = &cache.activations[l];
            let (gw, gb) = grad[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[offset..offset + fan_in * fan_out];
            // input of layer l is tanh-activated output of layer l-1
            let mut back = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                for (acc, wi) in back.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *acc += wi * d;
                }
            }
            for (b, a) in back.iter_mut().zip(input) {
                *b *= 1.0 - a * a;
            }
            delta = back;
        }
    }
}
