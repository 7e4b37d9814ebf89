//! Feed-forward networks assembled from the tensor ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(&self, t: &Tensor) -> Result<Tensor, TensorError> {
        match self {
            Activation::Relu => t.relu(),
            Activation::Tanh => t.tanh(),
            Activation::Softplus => t.softplus(),
            Activation::Identity => Ok(t.clone()),
        }
    }
}

/// Weight initialization for a linear layer.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// Weights `N(0, std_w^2)`, biases `N(0, std_b^2)`.
    Normal { std_w: f64, std_b: f64 },
    /// He-style: weights `N(0, gain^2 * 2 / fan_in)`, biases zero.
    HeNormal { gain: f64 },
}

/// `y = x W^T + b` with `W` stored row-major as `[out, in]`.
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn init<R: Rng>(
        rng: &mut R,
        fan_in: usize,
        fan_out: usize,
        init: WeightInit,
    ) -> LinearLayer {
        let (std_w, std_b) = match init {
            WeightInit::Normal { std_w, std_b } => (std_w, std_b),
            WeightInit::HeNormal { gain } => (gain * (2.0 / fan_in as f64).sqrt(), 0.0),
        };
        let wdist = Normal::new(0.0, std_w.max(f64::MIN_POSITIVE)).unwrap();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| wdist.sample(rng)).collect();
        let b: Vec<f64> = if std_b > 0.0 {
            let bdist = Normal::new(0.0, std_b).unwrap();
            (0..fan_out).map(|_| bdist.sample(rng)).collect()
        } else {
            vec![0.0; fan_out]
        };
        LinearLayer {
            weight: Tensor::param(&[fan_out, fan_in], w).unwrap(),
            bias: Tensor::param(&[fan_out], b).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul_nt(&self.weight)?.add(&self.bias)
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-feature affine layer normalization, applied before an activation.
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn identity(width: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::param(&[width], vec![1.0; width]).unwrap(),
            bias: Tensor::param(&[width], vec![0.0; width]).unwrap(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }
}

/// Fully connected network. Hidden layers run `linear -> [layer norm] ->
/// activation`; the output layer is activated only when `activate_output`
/// is set (and is never normalized).
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub norms: Vec<Option<LayerNorm>>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl Mlp {
    /// `dims` lists the layer widths input-first, e.g. `[2, 128, 128, 2]`.
    pub fn init<R: Rng>(
        rng: &mut R,
        dims: &[usize],
        activation: Activation,
        activate_output: bool,
        layer_norm: bool,
        init: WeightInit,
    ) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut norms = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            layers.push(LinearLayer::init(rng, dims[i], dims[i + 1], init));
            let last = i == dims.len() - 2;
            norms.push(if layer_norm && !last && dims[i + 1] >= 2 {
                Some(LayerNorm::identity(dims[i + 1]))
            } else {
                None
            });
        }
        Mlp { layers, norms, activation, activate_output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last || self.activate_output {
                if let Some(norm) = &self.norms[i] {
                    h = norm.forward(&h)?;
                }
                h = self.activation.apply(&h)?;
            }
        }
        Ok(h)
    }

    /// All trainable tensors, in a stable order.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut params = Vec::new();
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            params.push(layer.weight.clone());
            params.push(layer.bias.clone());
            if let Some(n) = norm {
                params.push(n.gain.clone());
                params.push(n.bias.clone());
            }
        }
        params
    }

    /// `(name, tensor)` pairs for checkpointing, prefixed by `prefix`.
    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut params = Vec::new();
        for (i, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            params.push((format!("{prefix}.w{i}"), layer.weight.clone()));
            params.push((format!("{prefix}.b{i}"), layer.bias.clone()));
            if let Some(n) = norm {
                params.push((format!("{prefix}.ln{i}.gain"), n.gain.clone()));
                params.push((format!("{prefix}.ln{i}.bias"), n.bias.clone()));
            }
        }
        params
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }
}
