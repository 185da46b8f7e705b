//! Heteroscedastic regression loss.
//!
//! `L = 0.5 * exp(-s) * ||target - mean||^2 + 0.5 * s` with `s = log(var)`.
//! Regressing the log-variance avoids division by a zero variance; `s` is
//! clamped to [`S_CLAMP`] before the exponential to guard overflow.

/// Symmetric clamp bound applied to the log-variance head.
pub const S_CLAMP: f64 = 20.0;

pub fn heteroscedastic_loss(mean: &[f64], s: f64, target: &[f64]) -> f64 {
    debug_assert_eq!(mean.len(), target.len());
    let s_eff = s.clamp(-S_CLAMP, S_CLAMP);
    let r2: f64 = mean.iter().zip(target).map(|(m, t)| (t - m) * (t - m)).sum();
    0.5 * (-s_eff).exp() * r2 + 0.5 * s_eff
}

/// Loss plus its gradient w.r.t. the network heads.
///
/// Returns `(loss, d_mean, d_s, clamped)`; `clamped` reports that `s` was
/// outside the clamp range (the gradient through the clamp is then zero).
pub fn heteroscedastic_loss_grad(
    mean: &[f64],
    s: f64,
    target: &[f64],
) -> (f64, Vec<f64>, f64, bool) {
    debug_assert_eq!(mean.len(), target.len());
    let clamped = !(-S_CLAMP..=S_CLAMP).contains(&s);
    let s_eff = s.clamp(-S_CLAMP, S_CLAMP);
    let inv_var = (-s_eff).exp();
    let r2: f64 = mean.iter().zip(target).map(|(m, t)| (t - m) * (t - m)).sum();
    let loss = 0.5 * inv_var * r2 + 0.5 * s_eff;
    let d_mean: Vec<f64> = mean.iter().zip(target).map(|(m, t)| inv_var * (m - t)).collect();
    let d_s = if clamped { 0.0 } else { -0.5 * inv_var * r2 + 0.5 };
    (loss, d_mean, d_s, clamped)
}
