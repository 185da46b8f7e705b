//! Reverse-mode gradients under the recorded dropout factors.
//!
//! Masks stay fixed during the backward pass: units dropped in the forward
//! pass contribute zero gradient, so only the surviving weights are updated.

use super::forward::ConcreteSettings;
use super::{sigmoid, Mlp, NnError};
use crate::nn::ForwardTrace;

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Per-hidden-layer drop-logit gradients; empty in fixed mode.
    pub logits: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
            logits: vec![0.0; net.dropout_logits.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        for (x, y) in self.logits.iter_mut().zip(&other.logits) {
            *x += c * y;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in v.iter_mut() {
                *x *= c;
            }
        }
        for x in self.logits.iter_mut() {
            *x *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.iter().all(|x| x.is_finite()))
            && self.logits.iter().all(|x| x.is_finite())
    }
}

/// Exact gradients of the recorded forward pass w.r.t. all parameters, given
/// the loss gradient at the output heads. When the trace came from a concrete
/// forward pass, the per-layer drop-logit gradients of the data loss are
/// included (regularizer terms are added separately by
/// [`add_concrete_regularizer_grads`]).
pub fn backward(
    net: &Mlp,
    trace: &ForwardTrace,
    d_mean: &[f64],
    d_s: f64,
) -> Result<Gradients, NnError> {
    let mut grads = Gradients::zeros_like(net);
    backward_accumulate(net, trace, d_mean, d_s, 1.0, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`], but adds `scale` times the gradient into an existing
/// accumulator. The training loop sums per-example gradients this way without
/// allocating or zeroing a parameter-sized buffer per example.
pub fn backward_accumulate(
    net: &Mlp,
    trace: &ForwardTrace,
    d_mean: &[f64],
    d_s: f64,
    scale: f64,
    grads: &mut Gradients,
) -> Result<(), NnError> {
    if d_mean.len() != net.spec.output_dim {
        return Err(NnError::ShapeMismatch {
            what: "output gradient components",
            expected: net.spec.output_dim,
            got: d_mean.len(),
        });
    }
    if trace.inputs.len() != net.layers.len() {
        return Err(NnError::ShapeMismatch {
            what: "trace layers",
            expected: net.layers.len(),
            got: trace.inputs.len(),
        });
    }

    let mut g: Vec<f64> =
        d_mean.iter().map(|v| v * scale).chain(std::iter::once(d_s * scale)).collect();

    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let input = &trace.inputs[l];

        let dw = &mut grads.weights[l];
        for (row, &gr) in g.iter().enumerate() {
            let base = row * layer.in_dim;
            let drow = &mut dw[base..base + layer.in_dim];
            for (d, &xi) in drow.iter_mut().zip(input) {
                *d += gr * xi;
            }
        }
        for (db, &gr) in grads.biases[l].iter_mut().zip(&g) {
            *db += gr;
        }

        if l == 0 {
            break;
        }

        // Gradient w.r.t. the dropped activation of hidden layer l-1.
        let mut g_a = vec![0.0; layer.in_dim];
        for (row, &gr) in g.iter().enumerate() {
            let w = &layer.weights[row * layer.in_dim..(row + 1) * layer.in_dim];
            for (ga, &wi) in g_a.iter_mut().zip(w) {
                *ga += gr * wi;
            }
        }

        let hl = l - 1;
        let pre = &trace.pre_acts[hl];
        let factors = &trace.factors[hl];

        if let Some(concrete) = &trace.concrete {
            // d factor / d logit = -d(1-d)/(t(1-p)) + z*p/(1-p).
            let logit = net.dropout_logits[hl];
            let p = sigmoid(logit);
            let inv_keep = 1.0 / (1.0 - p);
            let t = concrete.temperature;
            let mut acc = 0.0;
            for j in 0..pre.len() {
                let h = pre[j].max(0.0);
                let d = concrete.drop_relax[hl][j];
                let z = concrete.keep[hl][j];
                let dfactor = (-d * (1.0 - d) / t + z * p) * inv_keep;
                acc += g_a[j] * h * dfactor;
            }
            grads.logits[hl] += acc;
        }

        g = g_a
            .iter()
            .zip(factors)
            .zip(pre)
            .map(|((&ga, &f), &z)| if z > 0.0 { ga * f } else { 0.0 })
            .collect();
    }

    if !g.iter().all(|v| v.is_finite()) {
        return Err(NnError::NonFinite { layer: 0, stage: "gradient" });
    }
    Ok(())
}

/// The concrete-dropout regularizer: per hidden layer, the weight norm of the
/// consuming layer scaled by `1/(1-p)` plus the (negative) dropout entropy
/// scaled by the layer width.
pub fn concrete_regularizer(net: &Mlp, settings: &ConcreteSettings) -> f64 {
    let mut reg = 0.0;
    for hl in 0..net.n_hidden() {
        let p = sigmoid(net.dropout_logits[hl]);
        let w2: f64 = net.layers[hl + 1].weights.iter().map(|w| w * w).sum();
        let width = net.spec.hidden_widths[hl] as f64;
        reg += settings.weight_reg * w2 / (1.0 - p);
        reg += settings.dropout_reg * width * (xlnx(p) + xlnx(1.0 - p));
    }
    reg
}

/// Adds the regularizer's parameter gradients to `grads`.
pub fn add_concrete_regularizer_grads(
    net: &Mlp,
    settings: &ConcreteSettings,
    grads: &mut Gradients,
) {
    for hl in 0..net.n_hidden() {
        let logit = net.dropout_logits[hl];
        let p = sigmoid(logit);
        let layer = &net.layers[hl + 1];
        let w2: f64 = layer.weights.iter().map(|w| w * w).sum();
        let width = net.spec.hidden_widths[hl] as f64;

        let scale = 2.0 * settings.weight_reg / (1.0 - p);
        for (g, w) in grads.weights[hl + 1].iter_mut().zip(&layer.weights) {
            *g += scale * w;
        }
        // d/d logit, with dp/dlogit = p(1-p).
        grads.logits[hl] += settings.weight_reg * w2 * p / (1.0 - p)
            + settings.dropout_reg * width * logit * p * (1.0 - p);
    }
}

fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_spec;
    use super::*;
    use crate::nn::{
        heteroscedastic_loss, heteroscedastic_loss_grad, DropoutMode, Mlp,
    };
    use crate::rng;
    use rand::Rng;

    fn random_factors(net: &Mlp, rng: &mut crate::rng::Stream) -> Vec<Vec<f64>> {
        let p = net.spec.dropout_rate;
        net.spec
            .hidden_widths
            .iter()
            .map(|&w| {
                (0..w)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect()
            })
            .collect()
    }

    fn masked_loss(net: &Mlp, x: &[f64], target: &[f64], factors: &[Vec<f64>]) -> f64 {
        let trace = net.forward_with_factors(x, factors, None).unwrap();
        let out = trace.pre_acts.last().unwrap();
        let d = net.spec.output_dim;
        heteroscedastic_loss(&out[..d], out[d], target)
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let net = Mlp::init(&small_spec(), &mut rng::stream(1)).unwrap();
        let x = [0.2, -0.4, 1.0, 0.3, -0.9];
        let (_, _, trace) = net.forward_dropout(&x, &mut rng::stream(2)).unwrap();
        let grads = backward(&net, &trace, &[0.0, 0.0], 0.0).unwrap();
        assert!(grads.weights.iter().all(|v| v.iter().all(|&g| g == 0.0)));
        assert!(grads.biases.iter().all(|v| v.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn gradients_match_finite_differences_under_fixed_masks() {
        let mut net = Mlp::init(&small_spec(), &mut rng::stream(7)).unwrap();
        let mut r = rng::stream(8);
        // Jitter the zero-initialized biases so no pre-activation sits exactly
        // on a ReLU kink, where finite differences and subgradients disagree.
        for layer in net.layers.iter_mut() {
            for b in layer.biases.iter_mut() {
                *b = 0.1 * crate::rng::gaussian(&mut r);
            }
        }
        let x: Vec<f64> = (0..5).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        let target: Vec<f64> = (0..2).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        let factors = random_factors(&net, &mut r);

        let trace = net.forward_with_factors(&x, &factors, None).unwrap();
        let out = trace.pre_acts.last().unwrap();
        let (_, d_mean, d_s, _) = heteroscedastic_loss_grad(&out[..2], out[2], &target);
        let grads = backward(&net, &trace, &d_mean, d_s).unwrap();

        let h = 1e-5;
        for _ in 0..100 {
            let l = r.gen_range(0..net.layers.len());
            let probe_bias = r.gen::<f64>() < 0.2;
            let (analytic, fd) = if probe_bias {
                let i = r.gen_range(0..net.layers[l].biases.len());
                let mut plus = net.clone();
                plus.layers[l].biases[i] += h;
                let mut minus = net.clone();
                minus.layers[l].biases[i] -= h;
                (
                    grads.biases[l][i],
                    (masked_loss(&plus, &x, &target, &factors)
                        - masked_loss(&minus, &x, &target, &factors))
                        / (2.0 * h),
                )
            } else {
                let i = r.gen_range(0..net.layers[l].weights.len());
                let mut plus = net.clone();
                plus.layers[l].weights[i] += h;
                let mut minus = net.clone();
                minus.layers[l].weights[i] -= h;
                (
                    grads.weights[l][i],
                    (masked_loss(&plus, &x, &target, &factors)
                        - masked_loss(&minus, &x, &target, &factors))
                        / (2.0 * h),
                )
            };
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-10 {
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "layer {l}: analytic {analytic} vs fd {fd}"
                );
            } else {
                assert!((analytic - fd).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weights_into_dropped_units_get_zero_gradient() {
        let net = Mlp::init(&small_spec(), &mut rng::stream(7)).unwrap();
        // Drop unit 3 of the first hidden layer.
        let mut factors: Vec<Vec<f64>> = net
            .spec
            .hidden_widths
            .iter()
            .map(|&w| vec![1.0 / (1.0 - 0.3); w])
            .collect();
        factors[0][3] = 0.0;

        let x = [0.2, -0.4, 1.0, 0.3, -0.9];
        let target = [0.5, -0.5];
        let trace = net.forward_with_factors(&x, &factors, None).unwrap();
        let out = trace.pre_acts.last().unwrap();
        let (_, d_mean, d_s, _) = heteroscedastic_loss_grad(&out[..2], out[2], &target);
        let grads = backward(&net, &trace, &d_mean, d_s).unwrap();

        // Row 3 of layer 0 feeds only the dropped unit.
        let in_dim = net.layers[0].in_dim;
        for col in 0..in_dim {
            assert_eq!(grads.weights[0][3 * in_dim + col], 0.0);
        }
        assert_eq!(grads.biases[0][3], 0.0);
    }

    #[test]
    fn gradients_with_input_dropout_match_finite_differences() {
        let mut spec = small_spec();
        spec.input_dropout_rate = 0.4;
        let mut net = Mlp::init(&spec, &mut rng::stream(19)).unwrap();
        let mut r = rng::stream(20);
        for layer in net.layers.iter_mut() {
            for b in layer.biases.iter_mut() {
                *b = 0.1 * crate::rng::gaussian(&mut r);
            }
        }
        let x: Vec<f64> = (0..5).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        let target = [0.2, -0.6];
        let factors = random_factors(&net, &mut r);
        let input_factors: Vec<f64> =
            (0..5).map(|_| if r.gen::<f64>() < 0.4 { 0.0 } else { 1.0 / 0.6 }).collect();

        let loss_of = |net: &Mlp| {
            let trace = net.forward_with_factors(&x, &factors, Some(&input_factors)).unwrap();
            let out = trace.pre_acts.last().unwrap();
            heteroscedastic_loss(&out[..2], out[2], &target)
        };
        let trace = net.forward_with_factors(&x, &factors, Some(&input_factors)).unwrap();
        let out = trace.pre_acts.last().unwrap();
        let (_, d_mean, d_s, _) = heteroscedastic_loss_grad(&out[..2], out[2], &target);
        let grads = backward(&net, &trace, &d_mean, d_s).unwrap();

        let h = 1e-5;
        for i in 0..net.layers[0].weights.len() {
            let mut plus = net.clone();
            plus.layers[0].weights[i] += h;
            let mut minus = net.clone();
            minus.layers[0].weights[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grads.weights[0][i];
            let denom = an.abs().max(fd.abs());
            if denom > 1e-10 {
                assert!((an - fd).abs() / denom < 1e-4, "w[{i}]: {an} vs {fd}");
            }
            // Columns fed by dropped inputs get exactly zero gradient.
            let col = i % net.layers[0].in_dim;
            if input_factors[col] == 0.0 {
                assert_eq!(an, 0.0);
            }
        }
    }

    #[test]
    fn accumulate_matches_scaled_backward() {
        let net = Mlp::init(&small_spec(), &mut rng::stream(4)).unwrap();
        let x = [0.4, -0.2, 0.8, -0.5, 0.1];
        let (_, _, trace) = net.forward_dropout(&x, &mut rng::stream(5)).unwrap();
        let single = backward(&net, &trace, &[0.3, -0.7], 0.2).unwrap();
        let mut acc = Gradients::zeros_like(&net);
        backward_accumulate(&net, &trace, &[0.3, -0.7], 0.2, 0.25, &mut acc).unwrap();
        backward_accumulate(&net, &trace, &[0.3, -0.7], 0.2, 0.25, &mut acc).unwrap();
        for (a, b) in acc.weights.iter().flatten().zip(single.weights.iter().flatten()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn concrete_logit_gradients_match_finite_differences() {
        let mut spec = small_spec();
        spec.dropout_mode = DropoutMode::Concrete;
        spec.dropout_rate = 0.2;
        let net = Mlp::init(&spec, &mut rng::stream(3)).unwrap();
        let settings = ConcreteSettings { temperature: 0.5, weight_reg: 1e-3, dropout_reg: 1e-3 };

        let mut r = rng::stream(5);
        let x: Vec<f64> = (0..5).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        let target = [0.4, -0.1];
        // Fixed noise draws so the loss is deterministic in the parameters.
        let noise: Vec<Vec<f64>> = net
            .spec
            .hidden_widths
            .iter()
            .map(|&w| {
                (0..w)
                    .map(|_| {
                        let u: f64 = r.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
                        u.ln() - (1.0 - u).ln()
                    })
                    .collect()
            })
            .collect();

        let total_loss = |net: &Mlp| {
            let out = net.forward_concrete_with_noise(&x, &settings, &noise).unwrap();
            heteroscedastic_loss(&out.mean, out.s, &target) + out.regularizer
        };

        let out = net.forward_concrete_with_noise(&x, &settings, &noise).unwrap();
        let (_, d_mean, d_s, _) = heteroscedastic_loss_grad(&out.mean, out.s, &target);
        let mut grads = backward(&net, &out.trace, &d_mean, d_s).unwrap();
        add_concrete_regularizer_grads(&net, &settings, &mut grads);

        let h = 1e-5;
        for hl in 0..net.n_hidden() {
            let mut plus = net.clone();
            plus.dropout_logits[hl] += h;
            let mut minus = net.clone();
            minus.dropout_logits[hl] -= h;
            let fd = (total_loss(&plus) - total_loss(&minus)) / (2.0 * h);
            let analytic = grads.logits[hl];
            let denom = analytic.abs().max(fd.abs()).max(1e-10);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "logit {hl}: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
