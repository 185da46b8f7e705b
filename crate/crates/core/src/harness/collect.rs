//! Expert data collection: drive the MPC expert around the track and record
//! aligned (observation, control) pairs for every sensor channel.

use super::config::{component_seed, ExperimentConfig};
use super::logs::{LogError, TrajectoryRow};
use crate::expert::{BicycleProblem, MpcController};
use crate::rng;
use crate::sensors::{observe_rays, observe_state, RaySide, SensorChannel};
use crate::track::{is_crashed, step_dynamics, Control, LapCounter, VehicleState};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("expert crashed during collection at step {step} (trajectory retained)")]
    ExpertCrashed { step: u64, trajectory: Vec<TrajectoryRow> },
    #[error("expert stalled: {laps} laps after {steps} steps (budget exhausted)")]
    ExpertStalled { laps: u32, steps: u64 },
    #[error(transparent)]
    Dynamics(#[from] crate::track::DynamicsError),
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Aligned rows for one sensor channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelData {
    pub channel: SensorChannel,
    pub observations: Vec<Vec<f64>>,
    /// Expert (steering, throttle) per row.
    pub controls: Vec<[f64; 2]>,
}

impl ChannelData {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CollectOutput {
    pub datasets: Vec<ChannelData>,
    pub trajectory: Vec<TrajectoryRow>,
    pub lap_times: Vec<f64>,
}

/// Start state shared by collection and evaluation runs: on the centerline at
/// station 0, already at the target speed. Starting at speed keeps every run
/// inside the distribution the expert data covers (a single from-rest ramp
/// would be the one out-of-distribution moment of the whole pipeline).
pub fn start_state(config: &ExperimentConfig) -> VehicleState {
    let mut state = VehicleState::at_station(&config.track, 0.0);
    state.v_x = config.cost.target_speed;
    state
}

/// Runs the expert for `laps` laps at the configured rate, recording the
/// clean observation of every channel and the expert's control at each step.
/// Exploration noise (seeded from `seed`) perturbs the *executed* control so
/// the visited states cover a realistic tube around the racing line; the
/// recorded label is always the expert's clean command. Aborts (with the
/// trajectory retained for dumping) if the expert crashes.
pub fn collect_dataset(
    config: &ExperimentConfig,
    laps: u32,
    seed: u64,
) -> Result<CollectOutput, CollectError> {
    let track = config.track;
    let vehicle = config.vehicle;
    let dt = config.simulation.dt;
    let ray_cfg = config.ray_sensor_config();
    let problem = BicycleProblem { track, vehicle, cost: config.cost, dt };
    let mut mpc = MpcController::new(problem, config.ddp_config());

    // Ornstein-Uhlenbeck exploration noise on the executed control.
    let mut noise_rng = rng::stream(component_seed(seed, "collect/exploration"));
    let rho = (-dt / config.exploration.correlation_time).exp();
    let diffusion = (1.0 - rho * rho).sqrt();
    let mut noise = [0.0f64; 2];

    // Clean sensors draw nothing from this stream; it exists so the faulted
    // signature stays uniform.
    let mut unused_rng = rng::stream(0);

    let mut datasets: Vec<ChannelData> = SensorChannel::ALL
        .iter()
        .map(|&channel| ChannelData { channel, observations: Vec::new(), controls: Vec::new() })
        .collect();
    let mut trajectory = Vec::new();
    let mut lap_times = Vec::new();

    let mut state = start_state(config);
    let mut counter = LapCounter::new(0.0, &track);
    let max_steps = ((laps as f64 + 1.0) * config.lap_time_estimate() * 3.0 / dt) as u64;

    let mut step = 0u64;
    while counter.laps() < laps {
        if step >= max_steps {
            return Err(CollectError::ExpertStalled { laps: counter.laps(), steps: step });
        }
        let t = step as f64 * dt;

        let obs_state = observe_state(&state, &track, false, &mut unused_rng);
        let obs_left = observe_rays(&state, &track, &ray_cfg, RaySide::Left, false);
        let obs_right = observe_rays(&state, &track, &ray_cfg, RaySide::Right, false);

        let mpc_step = mpc.step(&state);
        let label = mpc_step.control;

        datasets[0].observations.push(obs_state.values.to_vec());
        datasets[1].observations.push(obs_left.ranges);
        datasets[2].observations.push(obs_right.ranges);
        for d in datasets.iter_mut() {
            d.controls.push([label.steering, label.throttle]);
        }

        noise[0] = rho * noise[0]
            + diffusion * config.exploration.steering_std * rng::gaussian(&mut noise_rng);
        noise[1] = rho * noise[1]
            + diffusion * config.exploration.throttle_std * rng::gaussian(&mut noise_rng);
        let executed = Control {
            steering: label.steering + noise[0],
            throttle: label.throttle + noise[1],
        }
        .clamped();

        trajectory.push(TrajectoryRow {
            step,
            t,
            p_x: state.p_x,
            p_y: state.p_y,
            theta: state.theta,
            v_x: state.v_x,
            v_y: state.v_y,
            theta_dot: state.theta_dot,
            steering: executed.steering,
            throttle: executed.throttle,
            lap: counter.laps(),
            crashed: false,
        });

        state = step_dynamics(&state, &executed, dt, &vehicle)?;
        step += 1;

        if is_crashed(&state, &track) {
            trajectory.push(TrajectoryRow {
                step,
                t: step as f64 * dt,
                p_x: state.p_x,
                p_y: state.p_y,
                theta: state.theta,
                v_x: state.v_x,
                v_y: state.v_y,
                theta_dot: state.theta_dot,
                steering: 0.0,
                throttle: 0.0,
                lap: counter.laps(),
                crashed: true,
            });
            return Err(CollectError::ExpertCrashed { step, trajectory });
        }

        let frame = track.project((state.p_x, state.p_y));
        let before = counter.laps();
        if counter.update(frame.s, &track) > before {
            lap_times.push(step as f64 * dt);
        }
    }

    Ok(CollectOutput { datasets, trajectory, lap_times })
}

fn column_names(channel: SensorChannel, dims: usize) -> Vec<String> {
    match channel {
        SensorChannel::State => {
            ["p_x", "p_y", "theta", "psi", "v_x", "v_y", "theta_dot"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        }
        _ => (0..dims).map(|i| format!("ray_{i:02}")).collect(),
    }
}

/// Writes one channel dataset as CSV: comment header lines carrying channel
/// name, dimensions, units, generator seed, and the config content hash, then
/// a column row, then data.
pub fn write_dataset(
    path: &Path,
    data: &ChannelData,
    seed: u64,
    config_sha1: &str,
) -> Result<(), LogError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let dims = data.observations.first().map_or(0, Vec::len);
    let units = match data.channel {
        SensorChannel::State => "si",
        _ => "meters",
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# schema_version=1")?;
    writeln!(
        w,
        "# channel={} dims={} units={} seed={} config_sha1={}",
        data.channel, dims, units, seed, config_sha1
    )?;
    let mut cols = column_names(data.channel, dims);
    cols.push("steering".into());
    cols.push("throttle".into());
    writeln!(w, "{}", cols.join(","))?;
    for (obs, ctl) in data.observations.iter().zip(&data.controls) {
        let mut fields: Vec<String> = obs.iter().map(|v| v.to_string()).collect();
        fields.push(ctl[0].to_string());
        fields.push(ctl[1].to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a channel dataset back; the channel is inferred from the header.
pub fn read_dataset(path: &Path) -> Result<ChannelData, LogError> {
    let file = std::fs::File::open(path)?;
    let mut channel: Option<SensorChannel> = None;
    let mut observations = Vec::new();
    let mut controls = Vec::new();
    let mut saw_columns = false;

    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.starts_with('#') {
            for token in line.trim_start_matches('#').split_whitespace() {
                if let Some(name) = token.strip_prefix("channel=") {
                    channel = SensorChannel::ALL.iter().copied().find(|c| c.name() == name);
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if !saw_columns {
            saw_columns = true; // column header row
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(LogError::Malformed {
                what: "dataset row",
                line: i + 1,
                reason: format!("expected at least 3 fields, got {}", fields.len()),
            });
        }
        let mut values = Vec::with_capacity(fields.len());
        for f in &fields {
            values.push(f.parse::<f64>().map_err(|_| LogError::Malformed {
                what: "dataset row",
                line: i + 1,
                reason: format!("bad float `{f}`"),
            })?);
        }
        let throttle = values.pop().unwrap();
        let steering = values.pop().unwrap();
        observations.push(values);
        controls.push([steering, throttle]);
    }

    let channel = channel.ok_or(LogError::Malformed {
        what: "dataset header",
        line: 1,
        reason: "missing channel tag".into(),
    })?;
    Ok(ChannelData { channel, observations, controls })
}

pub fn dataset_path(dir: &Path, channel: SensorChannel) -> std::path::PathBuf {
    dir.join(format!("{channel}.csv"))
}
