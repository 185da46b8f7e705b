//! Oval-track geometry, planar vehicle dynamics, crash detection, lap counting.
//!
//! The track is a stadium: two parallel straights joined by semicircular ends.
//! The centerline is parameterized by arc length (the *station* `s`), measured
//! in the driving direction from the start of the first straight. All public
//! stations, headings, and lateral signs follow the driving direction; the
//! internal parameterization is counterclockwise.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("track invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite vehicle state: {0:?}")]
    NonFiniteState(Box<VehicleState>),
    #[error("non-finite control: steering={steering}, throttle={throttle}")]
    NonFiniteControl { steering: f64, throttle: f64 },
    #[error("time step must be positive, got {0}")]
    InvalidDt(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackDirection {
    Counterclockwise,
    Clockwise,
}

/// Stadium-shaped closed track.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrackSpec {
    /// Length of each straight segment, meters.
    pub straight_length: f64,
    /// Centerline radius of each semicircular end, meters.
    pub turn_radius: f64,
    /// Centerline-to-boundary distance, meters.
    pub half_width: f64,
    pub direction: TrackDirection,
}

impl Default for TrackSpec {
    fn default() -> Self {
        TrackSpec {
            straight_length: 10.0,
            turn_radius: 3.0,
            half_width: 1.5,
            direction: TrackDirection::Counterclockwise,
        }
    }
}

/// Centerline point sampled at a driving-direction station.
#[derive(Debug, Clone, Copy)]
pub struct CenterlineSample {
    pub point: (f64, f64),
    /// Driving-direction tangent heading, radians.
    pub heading: f64,
    /// Unit normal pointing away from the track interior.
    pub outward: (f64, f64),
}

/// Result of projecting a plane point onto the centerline.
#[derive(Debug, Clone, Copy)]
pub struct CenterlineFrame {
    /// Arc-length station along the centerline, driving direction, `[0, length)`.
    pub s: f64,
    /// Signed distance from centerline, positive toward track-left
    /// (relative to the driving direction).
    pub lateral_offset: f64,
    pub nearest_point: (f64, f64),
    /// Centerline driving-direction heading at `s`.
    pub tangent_heading: f64,
}

impl TrackSpec {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.straight_length >= 0.0
            && self.turn_radius > self.half_width
            && self.half_width > 0.0
            && self.straight_length.is_finite()
            && self.turn_radius.is_finite())
        {
            return Err(TrackError::Invalid(format!(
                "need straight_length >= 0 and turn_radius > half_width > 0, got \
                 straight_length={}, turn_radius={}, half_width={}",
                self.straight_length, self.turn_radius, self.half_width
            )));
        }
        Ok(())
    }

    /// Total centerline length `2*straight + 2*pi*radius`.
    pub fn length(&self) -> f64 {
        2.0 * self.straight_length + 2.0 * PI * self.turn_radius
    }

    fn ccw_station(&self, s_driving: f64) -> f64 {
        match self.direction {
            TrackDirection::Counterclockwise => s_driving,
            TrackDirection::Clockwise => {
                let len = self.length();
                (len - s_driving).rem_euclid(len)
            }
        }
    }

    fn driving_station(&self, s_ccw: f64) -> f64 {
        // The map is its own inverse.
        self.ccw_station(s_ccw)
    }

    /// Samples the centerline at a driving-direction station (wrapped into range).
    pub fn sample(&self, s_driving: f64) -> CenterlineSample {
        let len = self.length();
        let s = self.ccw_station(s_driving.rem_euclid(len));
        let (point, heading_ccw, outward) = self.sample_ccw(s);
        let heading = match self.direction {
            TrackDirection::Counterclockwise => heading_ccw,
            TrackDirection::Clockwise => wrap_angle(heading_ccw + PI),
        };
        CenterlineSample { point, heading, outward }
    }

    /// Point, ccw tangent heading, and outward normal at a ccw station in `[0, len)`.
    fn sample_ccw(&self, s: f64) -> ((f64, f64), f64, (f64, f64)) {
        let a = self.straight_length;
        let r = self.turn_radius;
        let half_a = 0.5 * a;
        let arc = PI * r;
        if s < a {
            ((-half_a + s, -r), 0.0, (0.0, -1.0))
        } else if s < a + arc {
            let phi = -0.5 * PI + (s - a) / r;
            let (sin_p, cos_p) = phi.sin_cos();
            (
                (half_a + r * cos_p, r * sin_p),
                wrap_angle(phi + 0.5 * PI),
                (cos_p, sin_p),
            )
        } else if s < 2.0 * a + arc {
            ((half_a - (s - a - arc), r), PI, (0.0, 1.0))
        } else {
            let phi = 0.5 * PI + (s - 2.0 * a - arc) / r;
            let (sin_p, cos_p) = phi.sin_cos();
            (
                (-half_a + r * cos_p, r * sin_p),
                wrap_angle(phi + 0.5 * PI),
                (cos_p, sin_p),
            )
        }
    }

    /// Nearest-point projection onto the centerline; see [`project_to_centerline`].
    pub fn project(&self, point: (f64, f64)) -> CenterlineFrame {
        let a = self.straight_length;
        let r = self.turn_radius;
        let half_a = 0.5 * a;
        let arc = PI * r;
        let len = self.length();
        let (px, py) = point;

        // Candidates as (squared distance, ccw station, nearest point).
        let mut best: Option<(f64, f64, (f64, f64))> = None;
        let mut consider = |d2: f64, s_ccw: f64, q: (f64, f64)| {
            let s_drv = self.driving_station(if s_ccw >= len { s_ccw - len } else { s_ccw });
            match best {
                None => best = Some((d2, s_drv, q)),
                Some((bd2, bs, _)) => {
                    if d2 < bd2 - 0.0 || (d2 == bd2 && s_drv < bs) {
                        best = Some((d2, s_drv, q));
                    }
                }
            }
        };

        // Bottom straight, y = -r, x in [-a/2, a/2].
        if a > 0.0 {
            let x = px.clamp(-half_a, half_a);
            let d2 = (px - x) * (px - x) + (py + r) * (py + r);
            consider(d2, x + half_a, (x, -r));
            // Top straight, y = +r, traversed in -x.
            let x = px.clamp(-half_a, half_a);
            let d2 = (px - x) * (px - x) + (py - r) * (py - r);
            consider(d2, a + arc + (half_a - x), (x, r));
        }

        // Right arc: center (a/2, 0), angular domain [-pi/2, pi/2].
        {
            let vx = px - half_a;
            let vy = py;
            let norm = (vx * vx + vy * vy).sqrt();
            if norm < 1e-12 {
                // Arc center: every arc point is equidistant; smallest-s tie rule
                // picks the arc start.
                consider(r * r, a, (half_a, -r));
            } else if vx >= 0.0 {
                let phi = vy.atan2(vx);
                let q = (half_a + r * vx / norm, r * vy / norm);
                let d = norm - r;
                consider(d * d, a + (phi + 0.5 * PI) * r, q);
            }
        }

        // Left arc: center (-a/2, 0), angular domain [pi/2, 3pi/2] (ccw).
        {
            let vx = px + half_a;
            let vy = py;
            let norm = (vx * vx + vy * vy).sqrt();
            if norm < 1e-12 {
                consider(r * r, 2.0 * a + arc, (-half_a, r));
            } else if vx <= 0.0 {
                let phi = vy.atan2(vx);
                let phi_arc = if phi >= 0.5 * PI { phi } else { phi + 2.0 * PI };
                let q = (-half_a + r * vx / norm, r * vy / norm);
                let d = norm - r;
                consider(d * d, 2.0 * a + arc + (phi_arc - 0.5 * PI) * r, q);
            }
        }

        let (_, s, q) = best.expect("projection candidates cover the plane");
        let sample = self.sample(s);
        let left = (-sample.heading.sin(), sample.heading.cos());
        let lateral = (px - q.0) * left.0 + (py - q.1) * left.1;
        CenterlineFrame {
            s,
            lateral_offset: lateral,
            nearest_point: q,
            tangent_heading: sample.heading,
        }
    }
}

/// The 7-component physical state of the simulated car.
///
/// `psi` (roll) is carried for state-vector fidelity and stays 0 in the
/// planar simulation; `v_y` likewise stays 0 under the kinematic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub p_x: f64,
    pub p_y: f64,
    /// Heading, radians, normalized to `(-pi, pi]`.
    pub theta: f64,
    /// Roll angle, radians.
    pub psi: f64,
    /// Body-frame longitudinal velocity, m/s.
    pub v_x: f64,
    /// Body-frame lateral velocity, m/s.
    pub v_y: f64,
    /// Heading rate, rad/s.
    pub theta_dot: f64,
}

impl VehicleState {
    pub fn zeros() -> Self {
        VehicleState { p_x: 0.0, p_y: 0.0, theta: 0.0, psi: 0.0, v_x: 0.0, v_y: 0.0, theta_dot: 0.0 }
    }

    /// At rest on the centerline at the given driving station.
    pub fn at_station(track: &TrackSpec, s: f64) -> Self {
        let c = track.sample(s);
        VehicleState {
            p_x: c.point.0,
            p_y: c.point.1,
            theta: c.heading,
            ..VehicleState::zeros()
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.p_x, self.p_y, self.theta, self.psi, self.v_x, self.v_y, self.theta_dot]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        VehicleState { p_x: a[0], p_y: a[1], theta: a[2], psi: a[3], v_x: a[4], v_y: a[5], theta_dot: a[6] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Steering and throttle commands, each meaningful on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub steering: f64,
    pub throttle: f64,
}

impl Control {
    pub fn zero() -> Self {
        Control { steering: 0.0, throttle: 0.0 }
    }

    pub fn clamped(self) -> Self {
        Control {
            steering: self.steering.clamp(-1.0, 1.0),
            throttle: self.throttle.clamp(-1.0, 1.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.steering.is_finite() && self.throttle.is_finite()
    }
}

/// Kinematic-bicycle parameters with first-order velocity lag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Wheelbase, meters.
    pub wheelbase: f64,
    /// Maximum steering angle at `steering = 1`, radians.
    pub max_steer: f64,
    /// Speed at `throttle = 1`, m/s.
    pub max_speed: f64,
    /// First-order velocity time constant, seconds.
    pub velocity_tau: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams { wheelbase: 0.57, max_steer: 0.35, max_speed: 8.0, velocity_tau: 0.6 }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI);
    if w == 0.0 {
        PI
    } else {
        w - PI
    }
}

/// Advances the state by `dt` under the kinematic bicycle model.
///
/// Heading advances along an exact constant-curvature arc at the current
/// speed, then speed relaxes toward `throttle * max_speed` with the exact
/// first-order-lag solution. The two trivial regimes (rest, velocity-matched
/// straight motion) are therefore exact, and constant steering at constant
/// speed traces an exact circle of radius `wheelbase / tan(steer)`.
pub fn step_dynamics(
    state: &VehicleState,
    control: &Control,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, DynamicsError> {
    let mut next = step_dynamics_raw(state, control, dt, params)?;
    next.theta = wrap_angle(next.theta);
    Ok(next)
}

/// Same map as [`step_dynamics`] but without heading normalization.
///
/// The trajectory optimizer differentiates the dynamics by finite differences;
/// skipping the wrap keeps those differences smooth across `theta = +-pi`.
pub fn step_dynamics_raw(
    state: &VehicleState,
    control: &Control,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, DynamicsError> {
    if !control.is_finite() {
        return Err(DynamicsError::NonFiniteControl {
            steering: control.steering,
            throttle: control.throttle,
        });
    }
    bicycle_step(state, &control.clamped(), dt, params)
}

/// The bicycle map with no actuation clamp, for solver linearization: finite
/// differences at a saturated control must not straddle the clamp, which
/// would halve the control Jacobian there.
pub(crate) fn step_dynamics_unclamped(
    state: &VehicleState,
    control: &Control,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, DynamicsError> {
    bicycle_step(state, control, dt, params)
}

fn bicycle_step(
    state: &VehicleState,
    control: &Control,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState(Box::new(*state)));
    }
    if !control.is_finite() {
        return Err(DynamicsError::NonFiniteControl {
            steering: control.steering,
            throttle: control.throttle,
        });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::InvalidDt(dt));
    }
    let c = *control;

    let delta = c.steering * params.max_steer;
    let tan_d = delta.tan();
    let omega = state.v_x * tan_d / params.wheelbase;
    let dtheta = omega * dt;

    let (p_x, p_y) = if dtheta.abs() > 1e-8 {
        // Exact arc: turning radius wheelbase/tan(delta), independent of speed.
        let radius = params.wheelbase / tan_d;
        (
            state.p_x + radius * ((state.theta + dtheta).sin() - state.theta.sin()),
            state.p_y - radius * ((state.theta + dtheta).cos() - state.theta.cos()),
        )
    } else {
        // Small-angle arc with second-order correction so the branch seam is smooth.
        let step = state.v_x * dt;
        (
            state.p_x + step * (state.theta.cos() - 0.5 * dtheta * state.theta.sin()),
            state.p_y + step * (state.theta.sin() + 0.5 * dtheta * state.theta.cos()),
        )
    };

    let target = c.throttle * params.max_speed;
    let v_x = target + (state.v_x - target) * (-dt / params.velocity_tau).exp();

    Ok(VehicleState {
        p_x,
        p_y,
        theta: state.theta + dtheta,
        psi: 0.0,
        v_x,
        v_y: 0.0,
        theta_dot: omega,
    })
}

/// Nearest centerline point, station, driving tangent heading, and signed
/// lateral offset for an arbitrary plane point. Total on the plane; the two
/// arc-center singular points resolve to the smallest station of their arc.
pub fn project_to_centerline(point: (f64, f64), track: &TrackSpec) -> CenterlineFrame {
    track.project(point)
}

/// True iff the vehicle is strictly outside the track band (boundary inclusive:
/// a vehicle exactly at `|lateral| = half_width` has not crashed).
pub fn is_crashed(state: &VehicleState, track: &TrackSpec) -> bool {
    let frame = track.project((state.p_x, state.p_y));
    frame.lateral_offset.abs() > track.half_width
}

/// Lap counter with half-track hysteresis.
///
/// A wrap through station 0 increments the count only if the vehicle has
/// passed the half-track station since the previous counted wrap, so
/// projection jitter around the start line cannot double-count. Assumes
/// per-update station motion well below half a track length.
#[derive(Debug, Clone)]
pub struct LapCounter {
    laps: u32,
    armed: bool,
    prev_s: f64,
}

impl LapCounter {
    pub fn new(initial_s: f64, track: &TrackSpec) -> Self {
        LapCounter { laps: 0, armed: initial_s >= 0.5 * track.length(), prev_s: initial_s }
    }

    pub fn laps(&self) -> u32 {
        self.laps
    }

    /// Feeds the next station (driving direction, `[0, length)`); returns the
    /// updated lap count.
    pub fn update(&mut self, new_s: f64, track: &TrackSpec) -> u32 {
        let half = 0.5 * track.length();
        if self.prev_s - new_s > half {
            // Forward wrap through 0.
            if self.armed {
                self.laps += 1;
                self.armed = false;
            }
        } else if new_s - self.prev_s > half {
            // Backward jitter across 0: no count, no re-arm.
        } else if self.prev_s < half && new_s >= half {
            self.armed = true;
        }
        self.prev_s = new_s;
        self.laps
    }
}
