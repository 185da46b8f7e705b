//! Finite-horizon discrete LQR solved by the Riccati recursion.
//!
//! This is the independent oracle the test suites compare the iLQG solver
//! against: it shares no code with the backward/forward passes. The
//! [`DoubleIntegrator`] problem is the standard linear-quadratic instance
//! used for those comparisons.

use super::solver::{IlqgProblem, RunningQuadratics};
use nalgebra::{DMatrix, DVector};

/// Time-invariant LQR data for cost `sum x'Qx + u'Ru` with terminal `x'Qf x`.
#[derive(Debug, Clone)]
pub struct LqrProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
}

/// Per-stage optimal gains `u = -K x` and cost-to-go matrices.
#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub gains: Vec<DMatrix<f64>>,
    pub cost_to_go: Vec<DMatrix<f64>>,
}

/// Backward Riccati recursion over `horizon` stages:
/// `K_t = (R + B'P B)^-1 B'P A`, `P_t = Q + K'RK + (A-BK)'P(A-BK)`.
pub fn solve_riccati(problem: &LqrProblem, horizon: usize) -> LqrSolution {
    let mut p = problem.qf.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    let mut cost_to_go = vec![DMatrix::zeros(0, 0); horizon + 1];
    cost_to_go[horizon] = p.clone();
    for t in (0..horizon).rev() {
        let btp = problem.b.transpose() * &p;
        let m = &problem.r + &btp * &problem.b;
        let k = m.try_inverse().expect("R + B'PB is invertible") * (&btp * &problem.a);
        let acl = &problem.a - &problem.b * &k;
        p = &problem.q + k.transpose() * &problem.r * &k + acl.transpose() * &p * &acl;
        p = 0.5 * (&p + p.transpose());
        gains[t] = k;
        cost_to_go[t] = p.clone();
    }
    LqrSolution { gains, cost_to_go }
}

/// Optimal total cost from `x0`: `x0' P_0 x0`.
pub fn lqr_optimal_cost(solution: &LqrSolution, x0: &DVector<f64>) -> f64 {
    (x0.transpose() * &solution.cost_to_go[0] * x0)[(0, 0)]
}

/// Double-integrator tracking problem with exact (analytic) Jacobians and
/// unbounded controls; linear-quadratic, so the iLQG solver must be exact on it.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    pub lqr: LqrProblem,
}

impl DoubleIntegrator {
    pub fn new(dt: f64) -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, dt]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.1]);
        let r = DMatrix::from_row_slice(1, 1, &[0.01]);
        let qf = q.clone();
        DoubleIntegrator { lqr: LqrProblem { a, b, q, r, qf } }
    }
}

impl IlqgProblem for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.lqr.a * x + &self.lqr.b * u
    }

    fn dynamics_jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.lqr.a.clone(), self.lqr.b.clone())
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.lqr.q * x)[(0, 0)] + (u.transpose() * &self.lqr.r * u)[(0, 0)]
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.lqr.qf * x)[(0, 0)]
    }

    fn running_quadratics(&self, x: &DVector<f64>, u: &DVector<f64>) -> RunningQuadratics {
        RunningQuadratics {
            lx: 2.0 * &self.lqr.q * x,
            lxx: 2.0 * self.lqr.q.clone(),
            lu: 2.0 * &self.lqr.r * u,
            luu: 2.0 * self.lqr.r.clone(),
            lux: DMatrix::zeros(1, 2),
        }
    }

    fn terminal_quadratics(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (2.0 * &self.lqr.qf * x, 2.0 * self.lqr.qf.clone())
    }
}
