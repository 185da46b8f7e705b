//! Run artifacts on disk: trajectory CSV, JSONL event log, run manifest.

use crate::sensors::{FaultSchedule, SensorChannel};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {what} at line {line}: {reason}")]
    Malformed { what: &'static str, line: usize, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One simulation step of the trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub t: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub theta: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub theta_dot: f64,
    pub steering: f64,
    pub throttle: f64,
    pub lap: u32,
    pub crashed: bool,
}

pub const TRAJECTORY_HEADER: &str =
    "step,t,p_x,p_y,theta,v_x,v_y,theta_dot,steering,throttle,lap,crashed";

impl TrajectoryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.t,
            self.p_x,
            self.p_y,
            self.theta,
            self.v_x,
            self.v_y,
            self.theta_dot,
            self.steering,
            self.throttle,
            self.lap,
            self.crashed
        )
    }

    pub fn from_csv(line: &str, line_no: usize) -> Result<Self, LogError> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(LogError::Malformed {
                what: "trajectory row",
                line: line_no,
                reason: format!("expected 12 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64, LogError> {
            s.parse().map_err(|_| LogError::Malformed {
                what: "trajectory row",
                line: line_no,
                reason: format!("bad float `{s}`"),
            })
        };
        Ok(TrajectoryRow {
            step: fields[0].parse().map_err(|_| LogError::Malformed {
                what: "trajectory row",
                line: line_no,
                reason: "bad step".into(),
            })?,
            t: parse_f(fields[1])?,
            p_x: parse_f(fields[2])?,
            p_y: parse_f(fields[3])?,
            theta: parse_f(fields[4])?,
            v_x: parse_f(fields[5])?,
            v_y: parse_f(fields[6])?,
            theta_dot: parse_f(fields[7])?,
            steering: parse_f(fields[8])?,
            throttle: parse_f(fields[9])?,
            lap: fields[10].parse().map_err(|_| LogError::Malformed {
                what: "trajectory row",
                line: line_no,
                reason: "bad lap".into(),
            })?,
            crashed: fields[11] == "true",
        })
    }
}

/// Non-finite floats serialize as `null` and read back as infinity, keeping
/// the JSONL well-formed even for excluded learners.
mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Per-learner slice of a decision event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerRecord {
    pub channel: SensorChannel,
    pub mean: Vec<f64>,
    #[serde(with = "finite_or_null")]
    pub epistemic: f64,
    #[serde(with = "finite_or_null")]
    pub aleatoric: f64,
    #[serde(with = "finite_or_null")]
    pub total: f64,
}

/// One line of the JSONL event log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    /// Per-step observations, one vector per channel.
    Observation { step: u64, t: f64, state: Vec<f64>, left_rays: Vec<f64>, right_rays: Vec<f64> },
    /// Arbitration record: evaluated learners, the winner, the executed control.
    Decision {
        step: u64,
        t: f64,
        learners: Vec<LearnerRecord>,
        selected: usize,
        steering: f64,
        throttle: f64,
    },
    /// Fault gate transition on a channel (window-level, not burst-level).
    Fault { t: f64, channel: SensorChannel, active: bool },
    Lap { step: u64, t: f64, lap: u32 },
    Crash { step: u64, t: f64, lateral_offset: f64 },
    End { step: u64, t: f64, laps: u32, crashed: bool },
}

/// Metadata sidecar for a run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub policy: String,
    pub seed: u64,
    pub config_sha1: String,
    pub lap_budget: u32,
    pub laps: u32,
    pub crashed: bool,
    pub steps: u64,
    /// The time-domain fault schedule the run was driven with.
    pub schedule: FaultSchedule,
    /// Realized lap completion times, seconds.
    pub lap_times: Vec<f64>,
}

/// A completed closed-loop run: trajectory, events, manifest.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub manifest: RunManifest,
    pub trajectory: Vec<TrajectoryRow>,
    pub events: Vec<RunEvent>,
}

impl RunLog {
    pub fn crashed(&self) -> bool {
        self.manifest.crashed
    }

    pub fn decisions(&self) -> impl Iterator<Item = (&u64, &f64, &Vec<LearnerRecord>, &usize)> {
        self.events.iter().filter_map(|e| match e {
            RunEvent::Decision { step, t, learners, selected, .. } => {
                Some((step, t, learners, selected))
            }
            _ => None,
        })
    }

    /// Writes `trajectory.csv`, `events.jsonl`, and `run.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), LogError> {
        std::fs::create_dir_all(dir)?;
        let mut traj = std::io::BufWriter::new(std::fs::File::create(dir.join("trajectory.csv"))?);
        writeln!(traj, "{TRAJECTORY_HEADER}")?;
        for row in &self.trajectory {
            writeln!(traj, "{}", row.to_csv())?;
        }
        traj.flush()?;

        let mut events = std::io::BufWriter::new(std::fs::File::create(dir.join("events.jsonl"))?);
        for event in &self.events {
            writeln!(events, "{}", serde_json::to_string(event)?)?;
        }
        events.flush()?;

        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join("run.json"), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, LogError> {
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?;

        let mut trajectory = Vec::new();
        let file = std::fs::File::open(dir.join("trajectory.csv"))?;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != TRAJECTORY_HEADER {
                    return Err(LogError::Malformed {
                        what: "trajectory header",
                        line: 1,
                        reason: line,
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            trajectory.push(TrajectoryRow::from_csv(&line, i + 1)?);
        }

        let mut events = Vec::new();
        let file = std::fs::File::open(dir.join("events.jsonl"))?;
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line)?);
        }

        Ok(RunLog { manifest, trajectory, events })
    }
}
