//! Adam parameter updates with bias correction.

use super::{Gradients, Mlp};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    t: usize,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        AdamState { m: Gradients::zeros_like(net), v: Gradients::zeros_like(net), t: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }
}

/// One Adam update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
pub fn adam_step(net: &mut Mlp, grads: &Gradients, state: &mut AdamState, hp: &AdamParams) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);

    let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *param -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
    };

    for (l, layer) in net.layers.iter_mut().enumerate() {
        for (i, w) in layer.weights.iter_mut().enumerate() {
            update(w, grads.weights[l][i], &mut state.m.weights[l][i], &mut state.v.weights[l][i]);
        }
        for (i, b) in layer.biases.iter_mut().enumerate() {
            update(b, grads.biases[l][i], &mut state.m.biases[l][i], &mut state.v.biases[l][i]);
        }
    }
    for (i, logit) in net.dropout_logits.iter_mut().enumerate() {
        update(logit, grads.logits[i], &mut state.m.logits[i], &mut state.v.logits[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_spec;
    use super::*;
    use crate::nn::Mlp;
    use crate::rng;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut net = Mlp::init(&small_spec(), &mut rng::stream(1)).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net);
        let grads = Gradients::zeros_like(&net);
        // Seed a nonzero moment, then feed zero gradients: moments decay,
        // parameters stay put (m stays 0 here since it started at 0).
        for _ in 0..5 {
            adam_step(&mut net, &grads, &mut state, &AdamParams::default());
        }
        assert_eq!(net, before);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // Single scalar parameter, gradient g: with fresh moments and t = 1,
        // update = -lr * g / (|g| + eps).
        let hp = AdamParams::default();
        let g = 0.3;
        let (mut m, mut v) = (0.0, 0.0);
        let mut p = 1.0;
        m = hp.beta1 * m + (1.0 - hp.beta1) * g;
        v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
        let m_hat = m / (1.0 - hp.beta1);
        let v_hat = v / (1.0 - hp.beta2);
        p -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
        let expected = 1.0 - hp.learning_rate * g / (g.abs() + hp.epsilon);
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_reaches_sign_sgd_steady_state() {
        // With a constant gradient the update magnitude approaches lr*sign(g).
        let hp = AdamParams::default();
        let g = -0.037;
        let (mut m, mut v) = (0.0, 0.0);
        let mut p = 0.0;
        let mut last_update = 0.0;
        for t in 1..=2000 {
            m = hp.beta1 * m + (1.0 - hp.beta1) * g;
            v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
            let m_hat = m / (1.0 - hp.beta1.powi(t));
            let v_hat = v / (1.0 - hp.beta2.powi(t));
            last_update = -hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
            p += last_update;
        }
        assert!(
            (last_update.abs() - hp.learning_rate).abs() / hp.learning_rate < 0.01,
            "steady-state update {last_update}"
        );
        assert!(last_update > 0.0, "update moves against the gradient sign");
        assert!(p > 0.0);
    }

    #[test]
    fn network_update_moves_against_gradient() {
        let mut net = Mlp::init(&small_spec(), &mut rng::stream(1)).unwrap();
        let w0 = net.layers[0].weights[0];
        let mut grads = Gradients::zeros_like(&net);
        grads.weights[0][0] = 1.0;
        let mut state = AdamState::new(&net);
        adam_step(&mut net, &grads, &mut state, &AdamParams::default());
        assert!(net.layers[0].weights[0] < w0);
        assert_eq!(state.step_count(), 1);
    }
}
