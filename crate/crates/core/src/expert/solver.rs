//! Problem-generic iLQG: rollout, backward recursion, line-searched forward
//! pass, and the outer solve loop.

use super::DdpConfig;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackwardError {
    #[error("regularized control Hessian not positive definite at stage {stage}")]
    NotPositiveDefinite { stage: usize },
    #[error("non-finite quantity in backward pass at stage {stage}")]
    NonFinite { stage: usize },
}

/// Quadratic model of the running cost at one stage.
pub struct RunningQuadratics {
    pub lx: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub lu: DVector<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

/// A discrete-time trajectory-optimization problem.
pub trait IlqgProblem: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// One step of the discrete dynamics.
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Jacobians of the dynamics w.r.t. state and control. The default is
    /// central finite differences with per-component step `1e-5`.
    fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>)
    where
        Self: Sized,
    {
        let h = 1e-5;
        let n = self.state_dim();
        let m = self.control_dim();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for i in 0..n {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let col = (self.dynamics(&xp, u) - self.dynamics(&xm, u)) / (2.0 * h);
            a.set_column(i, &col);
        }
        for i in 0..m {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let col = (self.dynamics(x, &up) - self.dynamics(x, &um)) / (2.0 * h);
            b.set_column(i, &col);
        }
        (a, b)
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn running_quadratics(&self, x: &DVector<f64>, u: &DVector<f64>) -> RunningQuadratics;
    fn terminal_quadratics(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);

    /// Uniform box bounds on every control component, or `None` for an
    /// unbounded problem.
    fn control_bounds(&self) -> Option<(f64, f64)> {
        None
    }

    /// Applied to every control before it enters the dynamics or the cost.
    fn clamp_control(&self, u: &mut DVector<f64>) {
        if let Some((lo, hi)) = self.control_bounds() {
            for v in u.iter_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }
}

/// States, controls, and the total cost of one rollout. Invariant:
/// `states[t+1] = dynamics(states[t], controls[t])` exactly, and `total_cost`
/// recomputes from the sequences.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub total_cost: f64,
}

/// Feedforward/feedback gains from one backward pass, plus the coefficients
/// of the model-predicted cost decrease
/// `decrease(alpha) = -(alpha * linear + alpha^2/2 * quadratic)`.
#[derive(Debug, Clone)]
pub struct Gains {
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
    pub linear: f64,
    pub quadratic: f64,
}

impl Gains {
    /// Model-predicted cost decrease for a step of size `alpha` (nonnegative).
    pub fn expected_decrease(&self, alpha: f64) -> f64 {
        -(alpha * self.linear + 0.5 * alpha * alpha * self.quadratic)
    }
}

/// Rolls controls out from `x0`, clamping each control and accumulating cost.
pub fn rollout(problem: &impl IlqgProblem, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Trajectory {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut clamped = Vec::with_capacity(controls.len());
    let mut cost = 0.0;
    let mut x = x0.clone();
    for u in controls {
        let mut u = u.clone();
        problem.clamp_control(&mut u);
        cost += problem.running_cost(&x, &u);
        states.push(x.clone());
        x = problem.dynamics(&x, &u);
        clamped.push(u);
    }
    cost += problem.terminal_cost(&x);
    states.push(x);
    Trajectory { states, controls: clamped, total_cost: cost }
}

/// The iLQG backward recursion on the quadratic value-function model, with
/// `lambda` added to the control Hessian before inversion. Fails with
/// [`BackwardError::NotPositiveDefinite`] when the regularized Hessian is not
/// positive definite, which prompts the caller to raise `lambda`.
pub fn backward_pass(
    problem: &impl IlqgProblem,
    traj: &Trajectory,
    lambda: f64,
) -> Result<Gains, BackwardError> {
    let horizon = traj.controls.len();
    let m = problem.control_dim();

    let (mut vx, mut vxx) = problem.terminal_quadratics(traj.states.last().unwrap());
    let mut feedforward = vec![DVector::zeros(m); horizon];
    let mut feedback = vec![DMatrix::zeros(m, problem.state_dim()); horizon];
    let mut linear = 0.0;
    let mut quadratic = 0.0;

    for t in (0..horizon).rev() {
        let x = &traj.states[t];
        let u = &traj.controls[t];
        let (a, b) = problem.dynamics_jacobians(x, u);
        let q = problem.running_quadratics(x, u);

        let qx = &q.lx + a.transpose() * &vx;
        let qu = &q.lu + b.transpose() * &vx;
        let qxx = &q.lxx + a.transpose() * &vxx * &a;
        let qux = &q.lux + b.transpose() * &vxx * &a;
        let mut quu_reg = &q.luu + b.transpose() * &vxx * &b;
        for i in 0..m {
            quu_reg[(i, i)] += lambda;
        }

        let chol = match quu_reg.clone().cholesky() {
            Some(c) => c,
            None => return Err(BackwardError::NotPositiveDefinite { stage: t }),
        };
        let mut k = -chol.solve(&qu);
        let mut big_k = -chol.solve(&qux);

        // Freeze clamp-active components: a feedforward that pushes a control
        // past its bound predicts improvement the clamped forward pass can
        // never realize, which would stall the line search.
        if let Some((lo, hi)) = problem.control_bounds() {
            for i in 0..m {
                let blocked = (u[i] >= hi - 1e-9 && k[i] > 0.0) || (u[i] <= lo + 1e-9 && k[i] < 0.0);
                if blocked {
                    k[i] = 0.0;
                    for j in 0..big_k.ncols() {
                        big_k[(i, j)] = 0.0;
                    }
                }
            }
        }

        linear += k.dot(&qu);
        quadratic += (k.transpose() * &quu_reg * &k)[(0, 0)];

        vx = &qx
            + big_k.transpose() * &quu_reg * &k
            + big_k.transpose() * &qu
            + qux.transpose() * &k;
        vxx = &qxx
            + big_k.transpose() * &quu_reg * &big_k
            + big_k.transpose() * &qux
            + qux.transpose() * &big_k;
        // Keep the value Hessian symmetric against rounding drift.
        vxx = 0.5 * (&vxx + vxx.transpose());

        if !vx.iter().all(|v| v.is_finite()) || !vxx.iter().all(|v| v.is_finite()) {
            return Err(BackwardError::NonFinite { stage: t });
        }

        feedforward[t] = k;
        feedback[t] = big_k;
    }

    Ok(Gains { feedforward, feedback, linear, quadratic })
}

/// Rolls out `u = u_bar + alpha*k + K (x - x_bar)` with control clamping.
/// With `alpha = 0` and matching start state this reproduces the input
/// trajectory exactly. The cost may increase; the caller decides acceptance.
pub fn forward_pass(
    problem: &impl IlqgProblem,
    traj: &Trajectory,
    gains: &Gains,
    alpha: f64,
) -> Trajectory {
    let horizon = traj.controls.len();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut cost = 0.0;
    let mut x = traj.states[0].clone();
    for t in 0..horizon {
        let mut u =
            &traj.controls[t] + alpha * &gains.feedforward[t] + &gains.feedback[t] * (&x - &traj.states[t]);
        problem.clamp_control(&mut u);
        cost += problem.running_cost(&x, &u);
        states.push(x.clone());
        x = problem.dynamics(&x, &u);
        controls.push(u);
    }
    cost += problem.terminal_cost(&x);
    states.push(x);
    Trajectory { states, controls, total_cost: cost }
}

/// One accepted-or-attempted iteration of the outer loop, for solver traces.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub trajectory: Trajectory,
    /// False when no step was ever accepted (the warm-start rollout is
    /// returned unchanged).
    pub improved: bool,
    /// True when the loop stopped on the improvement tolerance rather than
    /// the iteration budget.
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
}

/// Full iLQG solve: backward/forward passes with a backtracking line search
/// over `alpha in {1, 1/2, 1/4, ...}` and multiplicative `lambda` adaptation.
/// Only cost-decreasing steps are accepted, so the returned trajectory never
/// costs more than the warm-start rollout.
pub fn ilqg_solve(
    problem: &impl IlqgProblem,
    x0: &DVector<f64>,
    warm_start: &[DVector<f64>],
    config: &DdpConfig,
) -> SolveResult {
    let mut nominal = rollout(problem, x0, warm_start);
    let mut lambda = config.lambda_init.max(config.lambda_min);
    let mut improved = false;
    let mut converged = false;
    let mut iterations = Vec::new();

    'outer: for iteration in 0..config.max_iterations {
        // Backward pass, raising lambda until the control Hessian goes PD.
        let gains = loop {
            match backward_pass(problem, &nominal, lambda) {
                Ok(g) => break g,
                Err(_) => {
                    lambda *= config.lambda_growth;
                    if lambda > config.lambda_max {
                        break 'outer;
                    }
                }
            }
        };

        // The model predicts essentially no improvement: done.
        if gains.expected_decrease(1.0) < config.convergence_tol {
            converged = true;
            break;
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..config.line_search_steps {
            let candidate = forward_pass(problem, &nominal, &gains, alpha);
            if candidate.total_cost.is_finite() && candidate.total_cost < nominal.total_cost {
                let improvement = nominal.total_cost - candidate.total_cost;
                nominal = candidate;
                improved = true;
                accepted = true;
                lambda = (lambda * config.lambda_shrink).max(config.lambda_min);
                iterations.push(IterationRecord {
                    iteration,
                    cost: nominal.total_cost,
                    lambda,
                    alpha,
                    accepted: true,
                });
                if improvement < config.convergence_tol {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            alpha *= 0.5;
        }

        if !accepted {
            iterations.push(IterationRecord {
                iteration,
                cost: nominal.total_cost,
                lambda,
                alpha,
                accepted: false,
            });
            lambda *= config.lambda_growth;
            if lambda > config.lambda_max {
                break;
            }
        }
    }

    SolveResult { trajectory: nominal, improved, converged, iterations }
}
