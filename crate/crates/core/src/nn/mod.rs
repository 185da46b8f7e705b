//! From-scratch feedforward networks with dropout.
//!
//! Each network maps an observation vector to `output_dim` control means plus
//! one scalar log-variance head `s` (so the final layer is `output_dim + 1`
//! wide). Dropout masks are sampled per hidden layer with inverted scaling
//! `1/(1-p)`, at training and at Monte-Carlo test time alike, so test-time
//! sampling uses exactly the training-time forward semantics.

mod adam;
mod backward;
mod forward;
mod loss;
mod train;

pub use adam::{adam_step, AdamParams, AdamState};
pub use backward::{
    add_concrete_regularizer_grads, backward, backward_accumulate, concrete_regularizer,
    Gradients,
};
pub use forward::{ConcreteOutput, ConcreteSettings, ConcreteTrace, ForwardTrace};
pub use loss::{heteroscedastic_loss, heteroscedastic_loss_grad, S_CLAMP};
pub use train::{train, Normalizer, TrainBatch, TrainConfig, TrainError, TrainResult};

use crate::rng::{gaussian, Stream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite activation in layer {layer} ({stage})")]
    NonFinite { layer: usize, stage: &'static str },
    #[error("shape mismatch: expected {expected} {what}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("concrete-dropout temperature must be positive, got {0}")]
    InvalidTemperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Fixed,
    Concrete,
}

/// Network architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// Number of control outputs; the network additionally emits one scalar
    /// log-variance head.
    pub output_dim: usize,
    pub activation: Activation,
    /// Per-hidden-layer dropout probability, `[0, 1)`.
    pub dropout_rate: f64,
    /// Dropout probability on the input components (dropout before the first
    /// weight layer). Sampling over input masks makes the predictive spread
    /// grow when one input contradicts the rest, which is what flags a
    /// corrupted sensor. Fixed-rate in both dropout modes.
    #[serde(default)]
    pub input_dropout_rate: f64,
    pub dropout_mode: DropoutMode,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NnError::InvalidSpec("zero input or output dimension".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidSpec("zero-width hidden layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::InvalidSpec(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(0.0..1.0).contains(&self.input_dropout_rate) {
            return Err(NnError::InvalidSpec(format!(
                "input_dropout_rate {} outside [0, 1)",
                self.input_dropout_rate
            )));
        }
        Ok(())
    }

    /// Width of the final linear layer: means plus the log-variance head.
    pub fn head_dim(&self) -> usize {
        self.output_dim + 1
    }
}

/// One dense layer, weights row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], biases: vec![0.0; out_dim] }
    }

    /// `out = W x + b`.
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for row in 0..self.out_dim {
            let w = &self.weights[row * self.in_dim..(row + 1) * self.in_dim];
            let mut acc = self.biases[row];
            for (wi, xi) in w.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

/// A multilayer perceptron with per-hidden-layer dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    /// Trainable drop-probability logits, one per hidden layer; empty in
    /// fixed-dropout mode.
    pub dropout_logits: Vec<f64>,
}

impl Mlp {
    /// He-style fan-in initialization for ReLU layers; zero biases (including
    /// the log-variance head). Draw order is layer-major, row-major.
    pub fn init(spec: &MlpSpec, rng: &mut Stream) -> Result<Mlp, NnError> {
        spec.validate()?;
        let mut dims = vec![spec.input_dim];
        dims.extend_from_slice(&spec.hidden_widths);
        dims.push(spec.head_dim());

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let mut layer = Layer::zeros(in_dim, out_dim);
            let scale = (2.0 / in_dim as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = scale * gaussian(rng);
            }
            layers.push(layer);
        }

        let dropout_logits = match spec.dropout_mode {
            DropoutMode::Fixed => Vec::new(),
            DropoutMode::Concrete => {
                // Initialize each layer's trainable p at the configured rate.
                let p = spec.dropout_rate.max(1e-4);
                vec![(p / (1.0 - p)).ln(); spec.hidden_widths.len()]
            }
        };

        Ok(Mlp { spec: spec.clone(), layers, dropout_logits })
    }

    pub fn n_hidden(&self) -> usize {
        self.spec.hidden_widths.len()
    }

    /// Effective drop probability of a hidden layer.
    pub fn drop_probability(&self, hidden_layer: usize) -> f64 {
        match self.spec.dropout_mode {
            DropoutMode::Fixed => self.spec.dropout_rate,
            DropoutMode::Concrete => sigmoid(self.dropout_logits[hidden_layer]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum::<usize>()
            + self.dropout_logits.len()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn small_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 5,
            hidden_widths: vec![8, 6],
            output_dim: 2,
            activation: Activation::Relu,
            dropout_rate: 0.3,
            input_dropout_rate: 0.0,
            dropout_mode: DropoutMode::Fixed,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = small_spec();
        let a = Mlp::init(&spec, &mut rng::stream(5)).unwrap();
        let b = Mlp::init(&spec, &mut rng::stream(5)).unwrap();
        assert_eq!(a, b);
        let c = Mlp::init(&spec, &mut rng::stream(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let spec = small_spec();
        let net = Mlp::init(&spec, &mut rng::stream(1)).unwrap();
        assert_eq!(net.layers.len(), 3);
        assert_eq!(net.layers[0].in_dim, 5);
        assert_eq!(net.layers[0].out_dim, 8);
        assert_eq!(net.layers[2].out_dim, 3); // 2 means + s head
        for layer in &net.layers {
            assert!(layer.biases.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = small_spec();
        spec.dropout_rate = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.hidden_widths = vec![0];
        assert!(spec.validate().is_err());
    }
}
