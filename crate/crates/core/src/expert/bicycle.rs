//! The oval-track driving problem for the iLQG solver, and the receding
//! horizon controller built on it.

use super::solver::{ilqg_solve, IlqgProblem, RunningQuadratics, SolveResult};
use super::{CostConfig, DdpConfig};
use crate::track::{
    step_dynamics, step_dynamics_unclamped, Control, DynamicsError, TrackSpec, VehicleParams,
    VehicleState,
};
use nalgebra::{DMatrix, DVector};

pub fn state_to_vector(state: &VehicleState) -> DVector<f64> {
    DVector::from_row_slice(&state.to_array())
}

pub fn vector_to_state(x: &DVector<f64>) -> VehicleState {
    VehicleState::from_array([x[0], x[1], x[2], x[3], x[4], x[5], x[6]])
}

/// Stage cost of the driving problem:
/// `w_lat * lateral^2 + w_vel * (V_x - V_des)^2 + w_ctl * (steer^2 + throttle^2)`.
pub fn running_cost(
    state: &VehicleState,
    control: &Control,
    cost: &CostConfig,
    track: &TrackSpec,
) -> f64 {
    terminal_cost(state, cost, track)
        + cost.w_control * (control.steering * control.steering + control.throttle * control.throttle)
}

/// The state-dependent terms only.
pub fn terminal_cost(state: &VehicleState, cost: &CostConfig, track: &TrackSpec) -> f64 {
    let frame = track.project((state.p_x, state.p_y));
    let dv = state.v_x - cost.target_speed;
    cost.w_lateral * frame.lateral_offset * frame.lateral_offset + cost.w_velocity * dv * dv
}

/// Central finite-difference Jacobians of [`step_dynamics`] w.r.t. state and
/// control, per-component step `h = 1e-5`. Fails if the dynamics reject any
/// perturbed point.
pub fn linearize_dynamics(
    state: &VehicleState,
    control: &Control,
    dt: f64,
    params: &VehicleParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    let h = 1e-5;
    let mut a = DMatrix::zeros(7, 7);
    let mut b = DMatrix::zeros(7, 2);
    let base = state.to_array();
    for i in 0..7 {
        let mut plus = base;
        plus[i] += h;
        let mut minus = base;
        minus[i] -= h;
        let fp = step_dynamics(&VehicleState::from_array(plus), control, dt, params)?;
        let fm = step_dynamics(&VehicleState::from_array(minus), control, dt, params)?;
        for (r, (p, m)) in fp.to_array().iter().zip(fm.to_array()).enumerate() {
            a[(r, i)] = (p - m) / (2.0 * h);
        }
    }
    for i in 0..2 {
        let mut up = *control;
        let mut um = *control;
        match i {
            0 => {
                up.steering += h;
                um.steering -= h;
            }
            _ => {
                up.throttle += h;
                um.throttle -= h;
            }
        }
        let fp = step_dynamics(state, &up, dt, params)?;
        let fm = step_dynamics(state, &um, dt, params)?;
        for (r, (p, m)) in fp.to_array().iter().zip(fm.to_array()).enumerate() {
            b[(r, i)] = (p - m) / (2.0 * h);
        }
    }
    Ok((a, b))
}

/// The driving problem over the raw (heading-unwrapped) bicycle dynamics.
///
/// The solver differentiates the dynamics by finite differences, so the
/// heading is left unwrapped inside the horizon; the world simulation applies
/// the wrap when executing the returned control.
#[derive(Debug, Clone)]
pub struct BicycleProblem {
    pub track: TrackSpec,
    pub vehicle: VehicleParams,
    pub cost: CostConfig,
    pub dt: f64,
}

impl IlqgProblem for BicycleProblem {
    fn state_dim(&self) -> usize {
        7
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let control = Control { steering: u[0], throttle: u[1] };
        match step_dynamics_unclamped(&vector_to_state(x), &control, self.dt, &self.vehicle) {
            Ok(next) => DVector::from_row_slice(&next.to_array()),
            Err(_) => DVector::from_element(7, f64::NAN),
        }
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let control = Control { steering: u[0], throttle: u[1] };
        running_cost(&vector_to_state(x), &control, &self.cost, &self.track)
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        terminal_cost(&vector_to_state(x), &self.cost, &self.track)
    }

    fn running_quadratics(&self, x: &DVector<f64>, u: &DVector<f64>) -> RunningQuadratics {
        let (lx, lxx) = self.state_quadratics(x);
        let lu = DVector::from_row_slice(&[
            2.0 * self.cost.w_control * u[0],
            2.0 * self.cost.w_control * u[1],
        ]);
        let luu = DMatrix::from_diagonal_element(2, 2, 2.0 * self.cost.w_control);
        let lux = DMatrix::zeros(2, 7);
        RunningQuadratics { lx, lxx, lu, luu, lux }
    }

    fn terminal_quadratics(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        self.state_quadratics(x)
    }

    fn control_bounds(&self) -> Option<(f64, f64)> {
        Some((-1.0, 1.0))
    }
}

impl BicycleProblem {
    /// Gauss-Newton quadratics of the state cost: the lateral term is
    /// expanded through the signed offset's gradient (the track-left unit
    /// normal at the projection), dropping the centerline-curvature term so
    /// the Hessian stays positive semidefinite.
    fn state_quadratics(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let frame = self.track.project((x[0], x[1]));
        let (nx, ny) = (-frame.tangent_heading.sin(), frame.tangent_heading.cos());
        let lat = frame.lateral_offset;
        let wl = self.cost.w_lateral;
        let wv = self.cost.w_velocity;

        let mut lx = DVector::zeros(7);
        lx[0] = 2.0 * wl * lat * nx;
        lx[1] = 2.0 * wl * lat * ny;
        lx[4] = 2.0 * wv * (x[4] - self.cost.target_speed);

        let mut lxx = DMatrix::zeros(7, 7);
        lxx[(0, 0)] = 2.0 * wl * nx * nx;
        lxx[(0, 1)] = 2.0 * wl * nx * ny;
        lxx[(1, 0)] = 2.0 * wl * nx * ny;
        lxx[(1, 1)] = 2.0 * wl * ny * ny;
        lxx[(4, 4)] = 2.0 * wv;
        (lx, lxx)
    }
}

/// One executed MPC step.
#[derive(Debug, Clone)]
pub struct MpcStep {
    pub control: Control,
    pub predicted_cost: f64,
    /// False when the solver could not improve on the shifted warm start.
    pub improved: bool,
}

/// Receding-horizon wrapper: solve, execute the first control, warm-start the
/// next solve from the shifted solution (last control repeated).
#[derive(Debug, Clone)]
pub struct MpcController {
    pub problem: BicycleProblem,
    pub config: DdpConfig,
    warm: Vec<DVector<f64>>,
}

impl MpcController {
    pub fn new(problem: BicycleProblem, config: DdpConfig) -> Self {
        let warm = vec![DVector::zeros(2); config.horizon];
        MpcController { problem, config, warm }
    }

    pub fn reset(&mut self) {
        self.warm = vec![DVector::zeros(2); self.config.horizon];
    }

    /// Solves from `state` with a bounded iteration budget and returns the
    /// first control of the solution. Deterministic given (state, warm
    /// start, config).
    pub fn step(&mut self, state: &VehicleState) -> MpcStep {
        let x0 = state_to_vector(state);
        let result: SolveResult = ilqg_solve(&self.problem, &x0, &self.warm, &self.config);
        let controls = &result.trajectory.controls;
        let control = Control { steering: controls[0][0], throttle: controls[0][1] }.clamped();

        self.warm.clear();
        self.warm.extend(controls.iter().skip(1).cloned());
        self.warm.push(controls.last().unwrap().clone());

        MpcStep { control, predicted_cost: result.trajectory.total_cost, improved: result.improved }
    }
}
