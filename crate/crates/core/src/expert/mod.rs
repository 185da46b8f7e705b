//! The oracle policy: iLQG trajectory optimization over the bicycle dynamics,
//! run receding-horizon as an MPC controller.
//!
//! The solver follows the iLQG variant of DDP: first-order dynamics
//! expansions (central finite differences), Gauss-Newton cost quadratics, a
//! Levenberg-style regularization of the control Hessian, and a backtracking
//! line search that only accepts cost-decreasing trajectories.

mod bicycle;
mod riccati;
mod solver;

pub use bicycle::{
    linearize_dynamics, running_cost, state_to_vector, terminal_cost, vector_to_state,
    BicycleProblem, MpcController, MpcStep,
};
pub use riccati::{lqr_optimal_cost, solve_riccati, DoubleIntegrator, LqrProblem, LqrSolution};
pub use solver::{
    backward_pass, forward_pass, ilqg_solve, rollout, BackwardError, Gains, IlqgProblem,
    IterationRecord, RunningQuadratics, SolveResult, Trajectory,
};

use serde::{Deserialize, Serialize};

/// Solver configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DdpConfig {
    /// Lookahead horizon, steps.
    pub horizon: usize,
    /// Integration step, seconds.
    pub dt: f64,
    /// Iteration budget per solve.
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_growth: f64,
    pub lambda_shrink: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Number of halvings tried in the backtracking line search.
    pub line_search_steps: usize,
    /// Stop once the accepted (or model-predicted) improvement falls below this.
    pub convergence_tol: f64,
}

impl Default for DdpConfig {
    fn default() -> Self {
        DdpConfig {
            horizon: 40,
            dt: 0.05,
            max_iterations: 15,
            lambda_init: 1e-6,
            lambda_growth: 10.0,
            lambda_shrink: 0.5,
            lambda_min: 1e-12,
            lambda_max: 1e10,
            line_search_steps: 8,
            convergence_tol: 1e-6,
        }
    }
}

impl DdpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon < 2 {
            return Err(format!("horizon must be >= 2, got {}", self.horizon));
        }
        if !(self.dt > 0.0) {
            return Err(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.lambda_init >= 0.0 && self.lambda_growth > 1.0 && self.lambda_shrink < 1.0) {
            return Err("lambda schedule malformed".into());
        }
        if !(self.convergence_tol > 0.0) {
            return Err("convergence_tol must be positive".into());
        }
        if self.line_search_steps == 0 {
            return Err("need at least one line-search step".into());
        }
        Ok(())
    }
}

/// Expert cost weights: stay on the centerline at the target speed with a
/// shared quadratic penalty on both control channels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostConfig {
    /// Centerline deviation weight, 1/m^2.
    pub w_lateral: f64,
    /// Forward-speed tracking weight, s^2/m^2.
    pub w_velocity: f64,
    /// Desired forward velocity, m/s.
    pub target_speed: f64,
    /// Shared quadratic weight for steering and throttle.
    pub w_control: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig { w_lateral: 4.0, w_velocity: 0.5, target_speed: 5.0, w_control: 0.1 }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.w_lateral < 0.0 || self.w_velocity < 0.0 || self.w_control < 0.0 {
            return Err("cost weights must be nonnegative".into());
        }
        Ok(())
    }
}
