//! Observation channels and fault injection.
//!
//! Three channels feed the three learners: a full-state sensor and two
//! side-facing ray-range arrays. Nominal sensors are noise-free; scheduled
//! faults corrupt them with the two configured noise models (out-of-track
//! position jumps, constant mid-range ray banding).

use crate::rng::Stream;
use crate::track::{TrackSpec, VehicleState};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magnitude bounds of the position-jump fault, as multiples of half_width.
const STATE_FAULT_OFFSET_MIN: f64 = 1.2;
const STATE_FAULT_OFFSET_MAX: f64 = 3.0;
/// Ray banding: contiguous block size and the faulted-block stride.
const RAY_FAULT_BLOCK: usize = 4;
const RAY_FAULT_STRIDE: usize = 2;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("fault schedule invalid: {0}")]
    InvalidSchedule(String),
}

/// The three observation channels, one per learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorChannel {
    State,
    LeftRays,
    RightRays,
}

impl SensorChannel {
    pub const ALL: [SensorChannel; 3] =
        [SensorChannel::State, SensorChannel::LeftRays, SensorChannel::RightRays];

    pub fn name(&self) -> &'static str {
        match self {
            SensorChannel::State => "state",
            SensorChannel::LeftRays => "left_rays",
            SensorChannel::RightRays => "right_rays",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            SensorChannel::State => 0,
            SensorChannel::LeftRays => 1,
            SensorChannel::RightRays => 2,
        }
    }
}

impl std::fmt::Display for SensorChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RaySide {
    Left,
    Right,
}

/// Full-state observation mirroring [`VehicleState`] field order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateObservation {
    pub values: [f64; 7],
}

/// Ray-range observation; entries in `[0, max_range]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RayObservation {
    pub ranges: Vec<f64>,
}

/// Side-mounted ray fan configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RaySensorConfig {
    pub ray_count: usize,
    /// Full fan span, radians.
    pub fan_angle: f64,
    /// Range clamp, meters.
    pub max_range: f64,
}

impl Default for RaySensorConfig {
    fn default() -> Self {
        RaySensorConfig {
            ray_count: 32,
            fan_angle: 120f64.to_radians(),
            max_range: 10.0,
        }
    }
}

/// One scheduled fault interval with intermittency gating.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FaultWindow {
    pub start: f64,
    pub end: f64,
    /// Active fraction of each burst period, in `(0, 1]`.
    pub duty_cycle: f64,
    /// Gating period, seconds.
    pub burst_period: f64,
}

/// Per-channel, time-indexed intermittent fault activation plan.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub state: Vec<FaultWindow>,
    pub left_rays: Vec<FaultWindow>,
    pub right_rays: Vec<FaultWindow>,
}

impl FaultSchedule {
    pub fn empty() -> Self {
        FaultSchedule::default()
    }

    pub fn channel(&self, channel: SensorChannel) -> &[FaultWindow] {
        match channel {
            SensorChannel::State => &self.state,
            SensorChannel::LeftRays => &self.left_rays,
            SensorChannel::RightRays => &self.right_rays,
        }
    }

    pub fn channel_mut(&mut self, channel: SensorChannel) -> &mut Vec<FaultWindow> {
        match channel {
            SensorChannel::State => &mut self.state,
            SensorChannel::LeftRays => &mut self.left_rays,
            SensorChannel::RightRays => &mut self.right_rays,
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        for ch in SensorChannel::ALL {
            let mut windows = self.channel(ch).to_vec();
            windows.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in &windows {
                if !(w.start >= 0.0 && w.end > w.start) {
                    return Err(SensorError::InvalidSchedule(format!(
                        "{ch}: window [{}, {}) is empty or negative",
                        w.start, w.end
                    )));
                }
                if !(w.duty_cycle > 0.0 && w.duty_cycle <= 1.0) {
                    return Err(SensorError::InvalidSchedule(format!(
                        "{ch}: duty_cycle {} outside (0, 1]",
                        w.duty_cycle
                    )));
                }
                if !(w.burst_period > 0.0) {
                    return Err(SensorError::InvalidSchedule(format!(
                        "{ch}: burst_period {} must be positive",
                        w.burst_period
                    )));
                }
            }
            for pair in windows.windows(2) {
                if pair[1].start < pair[0].end {
                    return Err(SensorError::InvalidSchedule(format!(
                        "{ch}: windows [{}, {}) and [{}, {}) overlap",
                        pair[0].start, pair[0].end, pair[1].start, pair[1].end
                    )));
                }
            }
        }
        Ok(())
    }
}

/// True iff `t` lies in a scheduled window for the channel and the
/// intermittency gate is open. The gate is deterministic phase gating: within
/// each burst period (measured from window start) the first
/// `duty_cycle * burst_period` seconds are active.
pub fn fault_active(schedule: &FaultSchedule, channel: SensorChannel, t: f64) -> bool {
    for w in schedule.channel(channel) {
        if t >= w.start && t < w.end {
            let phase = (t - w.start).rem_euclid(w.burst_period);
            return phase < w.duty_cycle * w.burst_period;
        }
    }
    false
}

/// Observes the full state. Unfaulted, the observation equals the true state
/// exactly. Faulted, the position components are replaced by a point drawn
/// uniformly outside the track band: station uniform on the centerline,
/// outward offset magnitude uniform in `[1.2, 3.0] * half_width`, so the
/// reported position always projects strictly outside the boundary.
pub fn observe_state(
    state: &VehicleState,
    track: &TrackSpec,
    fault_active: bool,
    rng: &mut Stream,
) -> StateObservation {
    let mut values = state.to_array();
    if fault_active {
        let s = rng.gen::<f64>() * track.length();
        let m = track.half_width
            * (STATE_FAULT_OFFSET_MIN
                + rng.gen::<f64>() * (STATE_FAULT_OFFSET_MAX - STATE_FAULT_OFFSET_MIN));
        let c = track.sample(s);
        values[0] = c.point.0 + m * c.outward.0;
        values[1] = c.point.1 + m * c.outward.1;
    }
    StateObservation { values }
}

/// Casts the side-facing ray fan and returns the distance to the nearer track
/// boundary along each ray, clamped to `max_range`. Faulted, every other
/// contiguous block of [`RAY_FAULT_BLOCK`] rays is replaced by the constant
/// mid-range value `max_range / 2`.
pub fn observe_rays(
    state: &VehicleState,
    track: &TrackSpec,
    cfg: &RaySensorConfig,
    side: RaySide,
    fault_active: bool,
) -> RayObservation {
    let center = match side {
        RaySide::Left => state.theta + std::f64::consts::FRAC_PI_2,
        RaySide::Right => state.theta - std::f64::consts::FRAC_PI_2,
    };
    let n = cfg.ray_count;
    let mut ranges = Vec::with_capacity(n);
    for i in 0..n {
        let offset = if n == 1 {
            0.0
        } else {
            -0.5 * cfg.fan_angle + cfg.fan_angle * i as f64 / (n - 1) as f64
        };
        let angle = center + offset;
        let dir = (angle.cos(), angle.sin());
        let t = ray_boundary_distance((state.p_x, state.p_y), dir, track);
        ranges.push(t.min(cfg.max_range).max(0.0));
    }
    if fault_active {
        let fill = 0.5 * cfg.max_range;
        for (i, r) in ranges.iter_mut().enumerate() {
            if (i / RAY_FAULT_BLOCK) % RAY_FAULT_STRIDE == 0 {
                *r = fill;
            }
        }
    }
    RayObservation { ranges }
}

/// Exact first intersection of a ray with the inner/outer track boundaries.
///
/// Each boundary is a stadium curve: two horizontal segments plus two
/// semicircular arcs. Returns infinity if the ray hits nothing.
fn ray_boundary_distance(origin: (f64, f64), dir: (f64, f64), track: &TrackSpec) -> f64 {
    let a = track.straight_length;
    let half_a = 0.5 * a;
    let r = track.turn_radius;
    let w = track.half_width;
    let mut best = f64::INFINITY;

    for rho in [r + w, r - w] {
        // Horizontal segments at y = +-rho, x in [-a/2, a/2].
        if a > 0.0 && dir.1 != 0.0 {
            for y in [-rho, rho] {
                let t = (y - origin.1) / dir.1;
                if t > 0.0 {
                    let x = origin.0 + t * dir.0;
                    if (-half_a..=half_a).contains(&x) {
                        best = best.min(t);
                    }
                }
            }
        }
        // Semicircular arcs centered at (+-a/2, 0): right arc keeps x >= a/2,
        // left arc keeps x <= -a/2.
        for (cx, keep_right) in [(half_a, true), (-half_a, false)] {
            let ox = origin.0 - cx;
            let oy = origin.1;
            // |o + t d|^2 = rho^2 with |d| = 1.
            let b = ox * dir.0 + oy * dir.1;
            let c = ox * ox + oy * oy - rho * rho;
            let disc = b * b - c;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            for t in [-b - sq, -b + sq] {
                if t > 0.0 {
                    let x = ox + t * dir.0;
                    if (keep_right && x >= 0.0) || (!keep_right && x <= 0.0) {
                        best = best.min(t);
                    }
                }
            }
        }
    }
    best
}
