//! Forward passes: deterministic, Bernoulli dropout, and the concrete
//! relaxation, all recording what the paired backward pass needs.

use super::{sigmoid, Mlp, NnError};
use crate::rng::Stream;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Everything recorded during one stochastic forward pass.
///
/// `inputs[l]` is the vector fed to weight layer `l` (so `inputs[0]` is the
/// network input), `pre_acts[l]` its linear output, and `factors[h]` the
/// multiplicative dropout factor applied to hidden activation `h`
/// (`mask/(1-p)` for Bernoulli masks, `keep/(1-p)` for concrete masks).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Vec<Vec<f64>>,
    pub pre_acts: Vec<Vec<f64>>,
    pub factors: Vec<Vec<f64>>,
    /// Input-component dropout factors, when input dropout is enabled.
    /// `inputs[0]` already has them applied.
    pub input_factors: Option<Vec<f64>>,
    pub concrete: Option<ConcreteTrace>,
}

/// Concrete-relaxation bookkeeping for the logit gradients.
#[derive(Debug, Clone)]
pub struct ConcreteTrace {
    /// Logistic noise `log u - log(1-u)` per hidden unit.
    pub noise: Vec<Vec<f64>>,
    /// Drop relaxation `d = sigmoid((logit + noise)/temperature)`.
    pub drop_relax: Vec<Vec<f64>>,
    /// Keep mask `z = 1 - d`.
    pub keep: Vec<Vec<f64>>,
    pub temperature: f64,
}

/// Training-time settings for concrete dropout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConcreteSettings {
    pub temperature: f64,
    /// Weight-norm regularizer coefficient (scaled by `1/(1-p)` per layer).
    pub weight_reg: f64,
    /// Dropout-entropy regularizer coefficient (scaled by layer width).
    pub dropout_reg: f64,
}

impl Default for ConcreteSettings {
    fn default() -> Self {
        ConcreteSettings { temperature: 0.1, weight_reg: 1e-6, dropout_reg: 1e-5 }
    }
}

/// Output of a concrete-dropout forward pass.
#[derive(Debug, Clone)]
pub struct ConcreteOutput {
    pub mean: Vec<f64>,
    pub s: f64,
    /// Current value of the weight + dropout-entropy regularizer.
    pub regularizer: f64,
    pub trace: ForwardTrace,
}

impl Mlp {
    /// Deterministic forward pass (no dropout), returning `(mean, s)`.
    pub fn forward_deterministic(&self, x: &[f64]) -> Result<(Vec<f64>, f64), NnError> {
        let ones: Vec<Vec<f64>> =
            self.spec.hidden_widths.iter().map(|&w| vec![1.0; w]).collect();
        let trace = self.forward_with_factors(x, &ones, None)?;
        Ok(split_head(trace.pre_acts.last().unwrap(), self.spec.output_dim))
    }

    /// Stochastic forward pass with fresh Bernoulli keep-masks per hidden
    /// layer, inverted scaling `1/(1-p)`. Returns the mean head, the
    /// log-variance head, and the recorded trace for the paired backward pass.
    ///
    /// A layer with `p == 0` consumes no random draws and applies factor 1,
    /// so the pass is bit-identical to the deterministic forward.
    pub fn forward_dropout(
        &self,
        x: &[f64],
        rng: &mut Stream,
    ) -> Result<(Vec<f64>, f64, ForwardTrace), NnError> {
        let input_factors = self.sample_input_factors(rng);
        let mut factors = Vec::with_capacity(self.n_hidden());
        for (h, &width) in self.spec.hidden_widths.iter().enumerate() {
            let p = self.drop_probability(h);
            let mut f = vec![1.0; width];
            if p > 0.0 {
                let scale = 1.0 / (1.0 - p);
                for fj in f.iter_mut() {
                    *fj = if rng.gen::<f64>() < p { 0.0 } else { scale };
                }
            }
            factors.push(f);
        }
        let trace = self.forward_with_factors(x, &factors, input_factors.as_deref())?;
        let (mean, s) = split_head(trace.pre_acts.last().unwrap(), self.spec.output_dim);
        Ok((mean, s, trace))
    }

    /// Bernoulli keep-factors for the input components; `None` when input
    /// dropout is disabled (no draws consumed).
    fn sample_input_factors(&self, rng: &mut Stream) -> Option<Vec<f64>> {
        let p = self.spec.input_dropout_rate;
        if p <= 0.0 {
            return None;
        }
        let scale = 1.0 / (1.0 - p);
        Some(
            (0..self.spec.input_dim)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
                .collect(),
        )
    }

    /// Forward pass under fixed, caller-supplied dropout factors. This is the
    /// replay path used by gradient checks: with the factors held fixed the
    /// network is a deterministic function of its parameters.
    pub fn forward_with_factors(
        &self,
        x: &[f64],
        factors: &[Vec<f64>],
        input_factors: Option<&[f64]>,
    ) -> Result<ForwardTrace, NnError> {
        if x.len() != self.spec.input_dim {
            return Err(NnError::ShapeMismatch {
                what: "input components",
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        if factors.len() != self.n_hidden() {
            return Err(NnError::ShapeMismatch {
                what: "dropout factor layers",
                expected: self.n_hidden(),
                got: factors.len(),
            });
        }
        if let Some(f) = input_factors {
            if f.len() != self.spec.input_dim {
                return Err(NnError::ShapeMismatch {
                    what: "input dropout factors",
                    expected: self.spec.input_dim,
                    got: f.len(),
                });
            }
        }

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut current = match input_factors {
            Some(f) => x.iter().zip(f).map(|(&xi, &fi)| xi * fi).collect(),
            None => x.to_vec(),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            if current.len() != layer.in_dim {
                return Err(NnError::ShapeMismatch {
                    what: "layer input width",
                    expected: layer.in_dim,
                    got: current.len(),
                });
            }
            let mut z = Vec::new();
            layer.apply(&current, &mut z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: l, stage: "pre-activation" });
            }
            inputs.push(std::mem::take(&mut current));
            let last = l + 1 == self.layers.len();
            if !last {
                let f = &factors[l];
                if f.len() != z.len() {
                    return Err(NnError::ShapeMismatch {
                        what: "dropout factor width",
                        expected: z.len(),
                        got: f.len(),
                    });
                }
                current = z.iter().zip(f).map(|(&zi, &fi)| zi.max(0.0) * fi).collect();
            }
            pre_acts.push(z);
        }

        Ok(ForwardTrace {
            inputs,
            pre_acts,
            factors: factors.to_vec(),
            input_factors: input_factors.map(|f| f.to_vec()),
            concrete: None,
        })
    }

    /// Concrete-dropout forward pass: hidden keep-masks are relaxed to
    /// `z = 1 - sigmoid((logit + log u - log(1-u)) / temperature)` with
    /// `u ~ Uniform(0,1)`, which keeps the pass differentiable in the per-layer
    /// drop-probability logits. As temperature shrinks the masks concentrate
    /// at {0, 1}; at logit -> -inf the keep mask saturates at 1 (keep all).
    pub fn forward_concrete(
        &self,
        x: &[f64],
        settings: &ConcreteSettings,
        rng: &mut Stream,
    ) -> Result<ConcreteOutput, NnError> {
        let input_factors = self.sample_input_factors(rng);
        let noise: Vec<Vec<f64>> = self
            .spec
            .hidden_widths
            .iter()
            .map(|&w| (0..w).map(|_| logistic_noise(rng)).collect())
            .collect();
        self.forward_concrete_with_noise_and_inputs(x, settings, &noise, input_factors.as_deref())
    }

    /// Replayable concrete forward with caller-supplied logistic noise.
    pub fn forward_concrete_with_noise(
        &self,
        x: &[f64],
        settings: &ConcreteSettings,
        noise: &[Vec<f64>],
    ) -> Result<ConcreteOutput, NnError> {
        self.forward_concrete_with_noise_and_inputs(x, settings, noise, None)
    }

    fn forward_concrete_with_noise_and_inputs(
        &self,
        x: &[f64],
        settings: &ConcreteSettings,
        noise: &[Vec<f64>],
        input_factors: Option<&[f64]>,
    ) -> Result<ConcreteOutput, NnError> {
        if !(settings.temperature > 0.0) {
            return Err(NnError::InvalidTemperature(settings.temperature));
        }
        if self.dropout_logits.len() != self.n_hidden() {
            return Err(NnError::ShapeMismatch {
                what: "dropout logits",
                expected: self.n_hidden(),
                got: self.dropout_logits.len(),
            });
        }

        let mut factors = Vec::with_capacity(self.n_hidden());
        let mut drop_relax = Vec::with_capacity(self.n_hidden());
        let mut keep = Vec::with_capacity(self.n_hidden());
        for h in 0..self.n_hidden() {
            let logit = self.dropout_logits[h];
            let p = sigmoid(logit);
            let scale = 1.0 / (1.0 - p);
            let mut d_layer = Vec::with_capacity(noise[h].len());
            let mut z_layer = Vec::with_capacity(noise[h].len());
            let mut f_layer = Vec::with_capacity(noise[h].len());
            for &n in &noise[h] {
                let d = sigmoid((logit + n) / settings.temperature);
                let z = 1.0 - d;
                d_layer.push(d);
                z_layer.push(z);
                f_layer.push(z * scale);
            }
            drop_relax.push(d_layer);
            keep.push(z_layer);
            factors.push(f_layer);
        }

        let mut trace = self.forward_with_factors(x, &factors, input_factors)?;
        trace.concrete = Some(ConcreteTrace {
            noise: noise.to_vec(),
            drop_relax,
            keep,
            temperature: settings.temperature,
        });
        let (mean, s) = split_head(trace.pre_acts.last().unwrap(), self.spec.output_dim);
        let regularizer = super::concrete_regularizer(self, settings);
        Ok(ConcreteOutput { mean, s, regularizer, trace })
    }
}

pub(crate) fn split_head(out: &[f64], output_dim: usize) -> (Vec<f64>, f64) {
    (out[..output_dim].to_vec(), out[output_dim])
}

fn logistic_noise(rng: &mut Stream) -> f64 {
    // log u - log(1-u) for u ~ U(0,1), nudged away from the endpoints.
    let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
    u.ln() - (1.0 - u).ln()
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_spec;
    use super::*;
    use crate::nn::{DropoutMode, Mlp};
    use crate::rng;

    #[test]
    fn zero_dropout_equals_deterministic_bitwise() {
        let mut spec = small_spec();
        spec.dropout_rate = 0.0;
        let net = Mlp::init(&spec, &mut rng::stream(3)).unwrap();
        let x = [0.3, -1.2, 0.5, 2.0, -0.7];
        let (m0, s0) = net.forward_deterministic(&x).unwrap();
        let (m1, s1, _) = net.forward_dropout(&x, &mut rng::stream(9)).unwrap();
        assert_eq!(m0, m1);
        assert_eq!(s0, s1);
    }

    #[test]
    fn dropout_forward_is_stream_deterministic() {
        let net = Mlp::init(&small_spec(), &mut rng::stream(3)).unwrap();
        let x = [0.3, -1.2, 0.5, 2.0, -0.7];
        let (m1, s1, _) = net.forward_dropout(&x, &mut rng::stream(11)).unwrap();
        let (m2, s2, _) = net.forward_dropout(&x, &mut rng::stream(11)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn masks_act_on_activations_only() {
        // Zero weights: output is the bias path regardless of the mask.
        let mut spec = small_spec();
        spec.dropout_rate = 0.5;
        let mut net = Mlp::init(&spec, &mut rng::stream(3)).unwrap();
        for layer in net.layers.iter_mut() {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let out_bias = net.layers.last_mut().unwrap();
        out_bias.biases = vec![0.7, -0.2, 0.1];
        let x = [1.0, 1.0, 1.0, 1.0, 1.0];
        for seed in 0..20 {
            let (m, s, _) = net.forward_dropout(&x, &mut rng::stream(seed)).unwrap();
            assert_eq!(m, vec![0.7, -0.2]);
            assert_eq!(s, 0.1);
        }
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let net = {
            let mut n = Mlp::init(&small_spec(), &mut rng::stream(3)).unwrap();
            n.layers[1].weights[0] = f64::NAN;
            n
        };
        let err = net.forward_deterministic(&[0.1; 5]).unwrap_err();
        match err {
            NnError::NonFinite { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn concrete_masks_concentrate_at_low_temperature() {
        let mut spec = small_spec();
        spec.dropout_mode = DropoutMode::Concrete;
        spec.hidden_widths = vec![500];
        spec.dropout_rate = 0.3;
        let net = Mlp::init(&spec, &mut rng::stream(3)).unwrap();
        let settings = ConcreteSettings { temperature: 0.01, ..Default::default() };
        let out = net
            .forward_concrete(&[0.1; 5], &settings, &mut rng::stream(4))
            .unwrap();
        let keep = &out.trace.concrete.as_ref().unwrap().keep[0];
        let mean_dist: f64 =
            keep.iter().map(|&z| z.min(1.0 - z)).sum::<f64>() / keep.len() as f64;
        assert!(mean_dist < 0.01, "mean distance to {{0,1}}: {mean_dist}");
    }

    #[test]
    fn concrete_saturates_to_keep_everything() {
        let mut spec = small_spec();
        spec.dropout_mode = DropoutMode::Concrete;
        let mut net = Mlp::init(&spec, &mut rng::stream(3)).unwrap();
        net.dropout_logits = vec![-20.0; net.n_hidden()];
        let out = net
            .forward_concrete(&[0.1; 5], &ConcreteSettings::default(), &mut rng::stream(4))
            .unwrap();
        for layer in &out.trace.concrete.as_ref().unwrap().keep {
            for &z in layer {
                assert!(z > 0.999, "keep mask {z}");
            }
        }
        // With p ~ 0 the pass matches the deterministic forward closely.
        let (m_det, s_det) = net.forward_deterministic(&[0.1; 5]).unwrap();
        assert!((out.s - s_det).abs() < 1e-6);
        for (a, b) in out.mean.iter().zip(&m_det) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn input_dropout_masks_the_input_components() {
        let mut spec = small_spec();
        spec.input_dropout_rate = 0.5;
        let net = Mlp::init(&spec, &mut rng::stream(3)).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (_, _, trace) = net.forward_dropout(&x, &mut rng::stream(6)).unwrap();
        let factors = trace.input_factors.as_ref().expect("input factors recorded");
        // inputs[0] is the masked input (factor 0 or 1/(1-p) = 2).
        for ((&xi, &fi), &stored) in x.iter().zip(factors).zip(&trace.inputs[0]) {
            assert!(fi == 0.0 || fi == 2.0);
            assert_eq!(stored, xi * fi);
        }
        // Some unit must be dropped at p = 0.5 across a few draws.
        let mut saw_dropped = false;
        for seed in 0..8 {
            let (_, _, t) = net.forward_dropout(&x, &mut rng::stream(seed)).unwrap();
            saw_dropped |= t.input_factors.unwrap().contains(&0.0);
        }
        assert!(saw_dropped);
    }

    #[test]
    fn zero_input_dropout_consumes_no_draws() {
        // With input dropout off, the draw sequence matches a network that
        // has no such feature, so older streams reproduce exactly.
        let spec = small_spec();
        let net = Mlp::init(&spec, &mut rng::stream(3)).unwrap();
        let x = [0.3, -1.2, 0.5, 2.0, -0.7];
        let mut r1 = rng::stream(9);
        let (m1, s1, t1) = net.forward_dropout(&x, &mut r1).unwrap();
        assert!(t1.input_factors.is_none());
        let mut spec2 = spec.clone();
        spec2.input_dropout_rate = 0.0;
        let net2 = Mlp { spec: spec2, ..net.clone() };
        let mut r2 = rng::stream(9);
        let (m2, s2, _) = net2.forward_dropout(&x, &mut r2).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn concrete_rejects_bad_temperature() {
        let mut spec = small_spec();
        spec.dropout_mode = DropoutMode::Concrete;
        let net = Mlp::init(&spec, &mut rng::stream(3)).unwrap();
        let settings = ConcreteSettings { temperature: 0.0, ..Default::default() };
        assert!(matches!(
            net.forward_concrete(&[0.1; 5], &settings, &mut rng::stream(4)),
            Err(NnError::InvalidTemperature(_))
        ));
    }
}
