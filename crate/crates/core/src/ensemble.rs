//! Monte Carlo predictive sampling, uncertainty decomposition, and the
//! min-variance ensemble arbiter.
//!
//! Each learner is sampled `K` times with fresh dropout masks; the sample
//! spread estimates epistemic uncertainty while the averaged variance head
//! estimates aleatoric uncertainty. Every step, the learner with the lowest
//! combined variance drives. Picking one learner (rather than blending)
//! avoids the multi-modal pathology where averaging a hard-left and a
//! hard-right policy steers straight.

use crate::nn::{Mlp, Normalizer, NnError};
use crate::rng::Stream;
use crate::sensors::SensorChannel;
use crate::track::Control;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no learner produced a finite total variance")]
    NoValidLearner,
    #[error("empty report list")]
    EmptyReports,
    #[error("learner {learner} failed: {source}")]
    LearnerFailed { learner: usize, source: NnError },
}

/// A trained learner bound to one sensor channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Learner {
    pub channel: SensorChannel,
    pub mlp: Mlp,
    pub normalizer: Normalizer,
}

/// `K` sampled (mean, aleatoric variance) pairs from one stochastic
/// forward-pass batch.
#[derive(Debug, Clone)]
pub struct PredictiveSamples {
    /// `K x output_dim` sampled mean heads.
    pub means: Vec<Vec<f64>>,
    /// `K` sampled aleatoric variances `exp(s)`.
    pub aleatoric_vars: Vec<f64>,
}

impl PredictiveSamples {
    pub fn k(&self) -> usize {
        self.means.len()
    }
}

/// Per-learner uncertainty summary for one observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// MC mean of the sampled control outputs (per dimension).
    pub mean: Vec<f64>,
    /// Spread of the sampled means (trace of the sample covariance).
    pub epistemic: f64,
    /// Average of the sampled aleatoric variances.
    pub aleatoric: f64,
    /// `epistemic + aleatoric`, the selection key.
    pub total: f64,
}

/// One arbitration step: every learner's report, the winner, and the control
/// that was executed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub t: f64,
    pub reports: Vec<UncertaintyReport>,
    pub selected: usize,
    pub control: Control,
}

impl Learner {
    /// `K` independent stochastic forward passes with fresh dropout masks,
    /// collecting the mean head and `exp(s)` per pass. Samples are indexed by
    /// draw order, so the result is a pure function of the stream state.
    pub fn mc_sample(
        &self,
        observation: &[f64],
        k: usize,
        rng: &mut Stream,
    ) -> Result<PredictiveSamples, NnError> {
        assert!(k >= 1, "need at least one Monte Carlo sample");
        let x = self.normalizer.apply(observation);
        let mut means = Vec::with_capacity(k);
        let mut aleatoric_vars = Vec::with_capacity(k);
        for _ in 0..k {
            let (mean, s, _) = self.mlp.forward_dropout(&x, rng)?;
            means.push(mean);
            aleatoric_vars.push(s.clamp(-crate::nn::S_CLAMP, crate::nn::S_CLAMP).exp());
        }
        Ok(PredictiveSamples { means, aleatoric_vars })
    }
}

/// Splits the predictive samples into epistemic and aleatoric parts.
///
/// Per output dimension the epistemic term is the population (1/K) variance
/// of the sampled means, `mean(u^2) - mean(u)^2`, summed over dimensions (the
/// trace of the sample covariance, which reduces to the scalar form when
/// `output_dim == 1`). The aleatoric term is the average sampled variance.
/// `total` is exactly their sum.
///
/// The variance is evaluated on samples shifted by the first row - an
/// algebraically identical form that avoids the catastrophic cancellation of
/// the raw moment difference when the spread is small against the mean.
pub fn decompose(samples: &PredictiveSamples) -> UncertaintyReport {
    let k = samples.k();
    assert!(k >= 1, "need at least one sample");
    let dim = samples.means[0].len();
    let inv_k = 1.0 / k as f64;
    let origin = samples.means[0].clone();

    let mut mean = vec![0.0; dim];
    let mut shifted_mean = vec![0.0; dim];
    let mut shifted_sq = vec![0.0; dim];
    for row in &samples.means {
        for d in 0..dim {
            let u = row[d];
            let shifted = u - origin[d];
            mean[d] += u;
            shifted_mean[d] += shifted;
            shifted_sq[d] += shifted * shifted;
        }
    }
    for d in 0..dim {
        mean[d] *= inv_k;
        shifted_mean[d] *= inv_k;
        shifted_sq[d] *= inv_k;
    }

    let epistemic: f64 = shifted_sq
        .iter()
        .zip(&shifted_mean)
        .map(|(&ms, &m)| ms - m * m)
        .sum::<f64>()
        .max(0.0);
    let aleatoric = samples.aleatoric_vars.iter().sum::<f64>() * inv_k;
    UncertaintyReport { mean, epistemic, aleatoric, total: epistemic + aleatoric }
}

/// Picks the learner with the lowest total variance; ties break to the lowest
/// index. Learners with non-finite totals are excluded. Returns the winner's
/// index and its mean control clamped to `[-1, 1]` per component.
pub fn min_variance_select(
    reports: &[UncertaintyReport],
) -> Result<(usize, Vec<f64>), EnsembleError> {
    if reports.is_empty() {
        return Err(EnsembleError::EmptyReports);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in reports.iter().enumerate() {
        if !r.total.is_finite() {
            continue;
        }
        match best {
            None => best = Some((i, r.total)),
            Some((_, t)) if r.total < t => best = Some((i, r.total)),
            _ => {}
        }
    }
    let (idx, _) = best.ok_or(EnsembleError::NoValidLearner)?;
    let control = reports[idx].mean.iter().map(|u| u.clamp(-1.0, 1.0)).collect();
    Ok((idx, control))
}

/// Baseline combiner: inverse-variance weighting of the learner means.
/// Not used by the main controller; kept to demonstrate its multi-modal
/// failure (two confident opposite policies average to "straight ahead").
/// A zero-variance learner takes full weight (first such, by index).
pub fn inverse_variance_blend(reports: &[UncertaintyReport]) -> Result<Vec<f64>, EnsembleError> {
    if reports.is_empty() {
        return Err(EnsembleError::EmptyReports);
    }
    let valid: Vec<&UncertaintyReport> =
        reports.iter().filter(|r| r.total.is_finite() && r.total >= 0.0).collect();
    if valid.is_empty() {
        return Err(EnsembleError::NoValidLearner);
    }
    if let Some(zero) = valid.iter().find(|r| r.total == 0.0) {
        return Ok(zero.mean.iter().map(|u| u.clamp(-1.0, 1.0)).collect());
    }
    let dim = valid[0].mean.len();
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for r in &valid {
        let w = 1.0 / r.total;
        den += w;
        for (n, &u) in num.iter_mut().zip(&r.mean) {
            *n += w * u;
        }
    }
    Ok(num.iter().map(|n| (n / den).clamp(-1.0, 1.0)).collect())
}

/// One full arbitration step: MC-sample and decompose every learner, then
/// select the minimum-variance one. `observations` and `rngs` are indexed
/// like `learners`. A failed learner is recorded with infinite variance and
/// excluded from selection; the step fails only if no learner is valid.
pub fn ensemble_step(
    learners: &[Learner],
    observations: &[Vec<f64>],
    k: usize,
    rngs: &mut [Stream],
    t: f64,
) -> Result<EnsembleDecision, EnsembleError> {
    assert_eq!(learners.len(), observations.len());
    assert_eq!(learners.len(), rngs.len());
    let reports: Vec<UncertaintyReport> = learners
        .iter()
        .zip(observations)
        .zip(rngs.iter_mut())
        .map(|((learner, obs), rng)| evaluate_learner(learner, obs, k, rng))
        .collect();
    finish_decision(reports, t)
}

/// Identical contract to [`ensemble_step`] but evaluates the learners on
/// concurrent threads. Each learner owns its stream and immutable parameters,
/// so the decision matches sequential evaluation exactly.
pub fn ensemble_step_parallel(
    learners: &[Learner],
    observations: &[Vec<f64>],
    k: usize,
    rngs: &mut [Stream],
    t: f64,
) -> Result<EnsembleDecision, EnsembleError> {
    assert_eq!(learners.len(), observations.len());
    assert_eq!(learners.len(), rngs.len());
    let mut reports: Vec<Option<UncertaintyReport>> = vec![None; learners.len()];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (((learner, obs), rng), slot) in learners
            .iter()
            .zip(observations)
            .zip(rngs.iter_mut())
            .zip(reports.iter_mut())
        {
            handles.push(scope.spawn(move || {
                *slot = Some(evaluate_learner(learner, obs, k, rng));
            }));
        }
        for h in handles {
            h.join().expect("learner evaluation panicked");
        }
    });
    finish_decision(reports.into_iter().map(Option::unwrap).collect(), t)
}

fn evaluate_learner(
    learner: &Learner,
    observation: &[f64],
    k: usize,
    rng: &mut Stream,
) -> UncertaintyReport {
    match learner.mc_sample(observation, k, rng) {
        Ok(samples) => decompose(&samples),
        Err(_) => UncertaintyReport {
            mean: vec![0.0; learner.mlp.spec.output_dim],
            epistemic: f64::INFINITY,
            aleatoric: f64::INFINITY,
            total: f64::INFINITY,
        },
    }
}

fn finish_decision(
    reports: Vec<UncertaintyReport>,
    t: f64,
) -> Result<EnsembleDecision, EnsembleError> {
    let (selected, control) = min_variance_select(&reports)?;
    let control =
        Control { steering: control[0], throttle: control.get(1).copied().unwrap_or(0.0) };
    Ok(EnsembleDecision { t, reports, selected, control: control.clamped() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DropoutMode, Mlp, MlpSpec, Normalizer};
    use crate::rng;

    fn samples(means: &[f64], vars: &[f64]) -> PredictiveSamples {
        PredictiveSamples {
            means: means.iter().map(|&m| vec![m]).collect(),
            aleatoric_vars: vars.to_vec(),
        }
    }

    fn report(mean: f64, total: f64) -> UncertaintyReport {
        UncertaintyReport { mean: vec![mean], epistemic: 0.0, aleatoric: total, total }
    }

    #[test]
    fn decompose_constant_samples() {
        let r = decompose(&samples(&[2.0, 2.0, 2.0], &[0.5, 0.5, 0.5]));
        assert_eq!(r.epistemic, 0.0);
        assert_eq!(r.aleatoric, 0.5);
        assert_eq!(r.total, 0.5);
        assert_eq!(r.mean, vec![2.0]);
    }

    #[test]
    fn decompose_known_values() {
        // means 1,2,3: epistemic = 14/3 - 4 = 2/3; aleatoric = 0.2; total = 13/15.
        let r = decompose(&samples(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3]));
        assert!((r.epistemic - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.aleatoric - 0.2).abs() < 1e-12);
        assert!((r.total - 13.0 / 15.0).abs() < 1e-12);
        assert_eq!(r.total, r.epistemic + r.aleatoric);
    }

    #[test]
    fn decompose_single_sample_is_aleatoric_only() {
        let r = decompose(&samples(&[0.7], &[0.9]));
        assert_eq!(r.epistemic, 0.0);
        assert_eq!(r.total, 0.9);
    }

    #[test]
    fn decompose_matches_two_pass_oracle() {
        use rand::Rng;
        let mut rng = rng::stream(3);
        for _ in 0..500 {
            let k = rng.gen_range(1..=16);
            let dim = rng.gen_range(1..=3);
            let means: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let vars: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let s = PredictiveSamples { means: means.clone(), aleatoric_vars: vars.clone() };
            let r = decompose(&s);

            // Two-pass oracle: mean of squared deviations from the mean.
            let mut epi = 0.0;
            for d in 0..dim {
                let m = means.iter().map(|row| row[d]).sum::<f64>() / k as f64;
                epi += means.iter().map(|row| (row[d] - m) * (row[d] - m)).sum::<f64>() / k as f64;
            }
            let denom = epi.abs().max(r.epistemic.abs()).max(1e-300);
            assert!(
                (epi - r.epistemic).abs() / denom < 1e-12 || (epi - r.epistemic).abs() < 1e-14
            );
            assert_eq!(r.total, r.epistemic + r.aleatoric);
        }
    }

    #[test]
    fn decompose_is_permutation_invariant() {
        let a = decompose(&samples(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3]));
        let b = decompose(&samples(&[3.0, 1.0, 2.0], &[0.3, 0.1, 0.2]));
        assert!((a.epistemic - b.epistemic).abs() < 1e-15);
        assert!((a.aleatoric - b.aleatoric).abs() < 1e-15);
    }

    #[test]
    fn min_variance_selects_the_argmin() {
        let reports = vec![report(0.1, 1.0), report(0.9, 0.5), report(-0.3, 2.0)];
        let (idx, u) = min_variance_select(&reports).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(u, vec![0.9]);
    }

    #[test]
    fn min_variance_breaks_ties_to_lowest_index() {
        let reports = vec![report(0.1, 1.0), report(0.9, 1.0), report(-0.3, 1.0)];
        let (idx, _) = min_variance_select(&reports).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn min_variance_is_scale_invariant() {
        let base = vec![report(0.1, 1.0), report(0.9, 0.5), report(-0.3, 2.0)];
        let (idx, _) = min_variance_select(&base).unwrap();
        for c in [0.3, 7.0, 1e6] {
            let scaled: Vec<UncertaintyReport> = base
                .iter()
                .map(|r| UncertaintyReport { total: c * r.total, ..r.clone() })
                .collect();
            assert_eq!(min_variance_select(&scaled).unwrap().0, idx);
        }
    }

    #[test]
    fn min_variance_excludes_non_finite_and_errors_when_empty() {
        let reports = vec![report(0.1, f64::NAN), report(0.9, 0.5)];
        assert_eq!(min_variance_select(&reports).unwrap().0, 1);
        let reports = vec![report(0.1, f64::NAN), report(0.9, f64::INFINITY)];
        assert!(matches!(min_variance_select(&reports), Err(EnsembleError::NoValidLearner)));
    }

    #[test]
    fn min_variance_clamps_the_winning_mean() {
        let reports = vec![report(1.7, 0.1)];
        let (_, u) = min_variance_select(&reports).unwrap();
        assert_eq!(u, vec![1.0]);
    }

    #[test]
    fn blend_averages_opposite_modes_to_straight() {
        // The multi-modal pathology: two confident opposite policies.
        let reports = vec![report(1.0, 0.4), report(-1.0, 0.4)];
        let u = inverse_variance_blend(&reports).unwrap();
        assert_eq!(u, vec![0.0]);
        // The arbiter picks one mode instead.
        let (idx, u) = min_variance_select(&reports).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(u, vec![1.0]);
    }

    #[test]
    fn blend_limit_conventions() {
        let reports = vec![report(0.5, 0.0), report(-0.5, 1.0)];
        assert_eq!(inverse_variance_blend(&reports).unwrap(), vec![0.5]);

        // variances (1,2,4), means (0,1,2) -> 4/7.
        let reports = vec![report(0.0, 1.0), report(1.0, 2.0), report(2.0, 4.0)];
        let u = inverse_variance_blend(&reports).unwrap();
        assert!((u[0] - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn blend_stays_in_convex_hull() {
        use rand::Rng;
        let mut rng = rng::stream(5);
        for _ in 0..200 {
            let reports: Vec<UncertaintyReport> = (0..3)
                .map(|_| report(rng.gen::<f64>() * 1.6 - 0.8, rng.gen::<f64>() + 0.01))
                .collect();
            let u = inverse_variance_blend(&reports).unwrap()[0];
            let lo = reports.iter().map(|r| r.mean[0]).fold(f64::INFINITY, f64::min);
            let hi = reports.iter().map(|r| r.mean[0]).fold(f64::NEG_INFINITY, f64::max);
            assert!(u >= lo - 1e-12 && u <= hi + 1e-12);
        }
    }

    fn test_learner(seed: u64, p: f64) -> Learner {
        let spec = MlpSpec {
            input_dim: 4,
            hidden_widths: vec![12, 8],
            output_dim: 2,
            activation: Activation::Relu,
            dropout_rate: p,
            input_dropout_rate: 0.0,
            dropout_mode: DropoutMode::Fixed,
        };
        Learner {
            channel: SensorChannel::State,
            mlp: Mlp::init(&spec, &mut rng::stream(seed)).unwrap(),
            normalizer: Normalizer::identity(4),
        }
    }

    #[test]
    fn mc_sample_zero_dropout_rows_are_identical() {
        let learner = test_learner(1, 0.0);
        let s = learner.mc_sample(&[0.2, -0.1, 0.5, 0.9], 10, &mut rng::stream(2)).unwrap();
        assert_eq!(s.k(), 10);
        for row in &s.means {
            assert_eq!(row, &s.means[0]);
        }
    }

    #[test]
    fn mc_sample_k1_matches_single_forward() {
        let learner = test_learner(1, 0.2);
        let obs = [0.2, -0.1, 0.5, 0.9];
        let s = learner.mc_sample(&obs, 1, &mut rng::stream(7)).unwrap();
        let x = learner.normalizer.apply(&obs);
        let (mean, sv, _) = learner.mlp.forward_dropout(&x, &mut rng::stream(7)).unwrap();
        assert_eq!(s.means[0], mean);
        assert_eq!(s.aleatoric_vars[0], sv.exp());
    }

    #[test]
    fn ensemble_step_matches_parallel_execution() {
        let learners = vec![test_learner(1, 0.2), test_learner(2, 0.2), test_learner(3, 0.2)];
        let obs = vec![vec![0.1, 0.2, 0.3, 0.4]; 3];
        let mut rngs_a: Vec<_> = (0..3).map(|i| rng::stream(100 + i)).collect();
        let mut rngs_b: Vec<_> = (0..3).map(|i| rng::stream(100 + i)).collect();
        let a = ensemble_step(&learners, &obs, 10, &mut rngs_a, 1.5).unwrap();
        let b = ensemble_step_parallel(&learners, &obs, 10, &mut rngs_b, 1.5).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.control, b.control);
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            assert_eq!(ra.mean, rb.mean);
            assert_eq!(ra.total, rb.total);
        }
    }

    #[test]
    fn deterministic_learner_with_tiny_variance_dominates() {
        // Learner 0: p = 0 (no epistemic spread) and a strongly negative s
        // head bias (tiny aleatoric variance). Others: ordinary dropout nets.
        let mut confident = test_learner(1, 0.0);
        let n_out = confident.mlp.layers.last().unwrap().biases.len();
        confident.mlp.layers.last_mut().unwrap().biases[n_out - 1] = -8.0;
        let learners = vec![confident, test_learner(2, 0.3), test_learner(3, 0.3)];
        let obs = vec![vec![0.1, 0.2, 0.3, 0.4]; 3];
        for seed in 0..10 {
            let mut rngs: Vec<_> = (0..3).map(|i| rng::stream(seed * 10 + i)).collect();
            let d = ensemble_step(&learners, &obs, 10, &mut rngs, 0.0).unwrap();
            assert_eq!(d.selected, 0);
        }
    }

    #[test]
    fn failed_learner_is_excluded_but_step_succeeds() {
        let mut broken = test_learner(1, 0.2);
        broken.mlp.layers[0].weights[0] = f64::NAN;
        let learners = vec![broken, test_learner(2, 0.2)];
        let obs = vec![vec![0.1, 0.2, 0.3, 0.4]; 2];
        let mut rngs: Vec<_> = (0..2).map(|i| rng::stream(i)).collect();
        let d = ensemble_step(&learners, &obs, 5, &mut rngs, 0.0).unwrap();
        assert_eq!(d.selected, 1);
        assert!(d.reports[0].total.is_infinite());
    }
}
