//! Experiment configuration: one TOML file drives every pipeline stage.

use crate::expert::{CostConfig, DdpConfig};
use crate::nn::{Activation, AdamParams, ConcreteSettings, DropoutMode, MlpSpec, TrainConfig};
use crate::sensors::{FaultSchedule, FaultWindow, RaySensorConfig, SensorChannel};
use crate::track::{TrackSpec, VehicleParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (this build reads {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("override `{key}` is malformed: {reason}")]
    BadOverride { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Control period, seconds (20 Hz default).
    pub dt: f64,
    /// Expert laps recorded by `collect`.
    pub collect_laps: u32,
    /// Lap budget for `drive` runs.
    pub lap_budget: u32,
    /// Monte Carlo samples per learner per step.
    pub n_mc: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { dt: 0.05, collect_laps: 28, lap_budget: 17, n_mc: 10 }
    }
}

/// Solver settings; `dt` comes from `[simulation]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub horizon: usize,
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_growth: f64,
    pub lambda_shrink: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub line_search_steps: usize,
    pub convergence_tol: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        let d = DdpConfig::default();
        ExpertConfig {
            horizon: d.horizon,
            max_iterations: d.max_iterations,
            lambda_init: d.lambda_init,
            lambda_growth: d.lambda_growth,
            lambda_shrink: d.lambda_shrink,
            lambda_min: d.lambda_min,
            lambda_max: d.lambda_max,
            line_search_steps: d.line_search_steps,
            convergence_tol: d.convergence_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RayConfig {
    pub ray_count: usize,
    pub fan_angle_deg: f64,
    pub max_range: f64,
}

impl Default for RayConfig {
    fn default() -> Self {
        RayConfig { ray_count: 32, fan_angle_deg: 120.0, max_range: 10.0 }
    }
}

/// Exploration noise added to the *executed* control during data collection
/// (labels stay the expert's clean command). A perfectly tracking simulated
/// expert visits only a hair-thin tube of states; correlated actuation noise
/// spreads collection over the tube the learners will actually see, with the
/// expert providing the corrective label at every visited state.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExplorationConfig {
    /// Ornstein-Uhlenbeck stationary std on the steering channel.
    pub steering_std: f64,
    /// Ornstein-Uhlenbeck stationary std on the throttle channel.
    pub throttle_std: f64,
    /// Noise correlation time, seconds.
    pub correlation_time: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig { steering_std: 0.15, throttle_std: 0.08, correlation_time: 0.6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub hidden_widths: Vec<usize>,
    pub dropout_rate: f64,
    /// Dropout on the input components (dropout before the first weight
    /// layer); the lever that makes a corrupted input raise the predictive
    /// spread.
    #[serde(default)]
    pub input_dropout_rate: f64,
    pub dropout_mode: DropoutMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Concrete-dropout settings, used only when `dropout_mode = "concrete"`.
    pub concrete_temperature: f64,
    pub concrete_weight_reg: f64,
    pub concrete_dropout_reg: f64,
}

impl LearnerConfig {
    fn desk_default(hidden: Vec<usize>) -> Self {
        let c = ConcreteSettings::default();
        LearnerConfig {
            hidden_widths: hidden,
            dropout_rate: 0.1,
            input_dropout_rate: 0.0,
            dropout_mode: DropoutMode::Fixed,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 200,
            concrete_temperature: c.temperature,
            concrete_weight_reg: c.weight_reg,
            concrete_dropout_reg: c.dropout_reg,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerSet {
    pub state: LearnerConfig,
    pub left_rays: LearnerConfig,
    pub right_rays: LearnerConfig,
}

impl Default for LearnerSet {
    fn default() -> Self {
        // The paper-scale preset for the state network is [1024, 512, 256,
        // 128]; these desk-scale defaults keep training in minutes. The state
        // learner runs input dropout so that a corrupted position raises its
        // Monte Carlo spread, and trains harder: its inputs need weights that
        // resolve centimeter-scale position structure against meter-scale
        // standardization.
        let mut state = LearnerConfig::desk_default(vec![128, 128]);
        state.dropout_rate = 0.05;
        state.input_dropout_rate = 0.05;
        state.learning_rate = 3e-3;
        state.epochs = 600;
        LearnerSet {
            state,
            left_rays: LearnerConfig::desk_default(vec![128, 64]),
            right_rays: LearnerConfig::desk_default(vec![128, 64]),
        }
    }
}

impl LearnerSet {
    pub fn get(&self, channel: SensorChannel) -> &LearnerConfig {
        match channel {
            SensorChannel::State => &self.state,
            SensorChannel::LeftRays => &self.left_rays,
            SensorChannel::RightRays => &self.right_rays,
        }
    }
}

/// One scheduled fault window, in lap units (converted to seconds via the
/// configured lap-time estimate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowSpec {
    pub channels: Vec<SensorChannel>,
    pub start_lap: f64,
    pub end_lap: f64,
    pub duty_cycle: Option<f64>,
    pub burst_period: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultConfig {
    /// Default active fraction of each burst period.
    pub duty_cycle: f64,
    /// Default burst period, seconds.
    pub burst_period: f64,
    pub windows: Vec<WindowSpec>,
}

impl Default for FaultConfig {
    fn default() -> Self {
        // The test schedule: 4 clean laps, then 2-lap windows on the state
        // channel, the left rays, and both ray channels, separated by 2 clean
        // laps, inside a 17-lap budget.
        FaultConfig {
            duty_cycle: 0.7,
            burst_period: 1.0,
            windows: vec![
                WindowSpec {
                    channels: vec![SensorChannel::State],
                    start_lap: 4.0,
                    end_lap: 6.0,
                    duty_cycle: None,
                    burst_period: None,
                },
                WindowSpec {
                    channels: vec![SensorChannel::LeftRays],
                    start_lap: 8.0,
                    end_lap: 10.0,
                    duty_cycle: None,
                    burst_period: None,
                },
                WindowSpec {
                    channels: vec![SensorChannel::LeftRays, SensorChannel::RightRays],
                    start_lap: 12.0,
                    end_lap: 14.0,
                    duty_cycle: None,
                    burst_period: None,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub track: TrackSpec,
    pub vehicle: VehicleParams,
    pub simulation: SimulationConfig,
    pub expert: ExpertConfig,
    pub cost: CostConfig,
    pub rays: RayConfig,
    pub exploration: ExplorationConfig,
    pub learners: LearnerSet,
    pub faults: FaultConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            track: TrackSpec::default(),
            vehicle: VehicleParams::default(),
            simulation: SimulationConfig::default(),
            expert: ExpertConfig::default(),
            cost: CostConfig::default(),
            rays: RayConfig::default(),
            exploration: ExplorationConfig::default(),
            learners: LearnerSet::default(),
            faults: FaultConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: config.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file and applies `--set key=value` overrides (dotted
    /// paths into the TOML document, values parsed as TOML fragments).
    pub fn load(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn from_toml_with_overrides(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Self::from_toml_str(text);
        }
        let mut doc: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        let rendered = toml::to_string(&doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_toml_str(&rendered)
    }

    /// Canonical serialization, the input of [`Self::content_hash`].
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Git-style blob hash of the canonical serialization; stamped into
    /// dataset headers and checkpoints so artifacts are traceable to the
    /// exact configuration that produced them.
    pub fn content_hash(&self) -> String {
        crate::util::git_blob_hash(self.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.track.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.simulation.dt > 0.0) {
            return Err(ConfigError::Invalid("simulation.dt must be positive".into()));
        }
        if self.simulation.n_mc == 0 {
            return Err(ConfigError::Invalid("simulation.n_mc must be at least 1".into()));
        }
        self.ddp_config().validate().map_err(ConfigError::Invalid)?;
        self.cost.validate().map_err(ConfigError::Invalid)?;
        if self.rays.ray_count < 2 {
            return Err(ConfigError::Invalid("rays.ray_count must be at least 2".into()));
        }
        if !(self.rays.fan_angle_deg > 0.0 && self.rays.fan_angle_deg <= 360.0) {
            return Err(ConfigError::Invalid("rays.fan_angle_deg outside (0, 360]".into()));
        }
        if !(self.rays.max_range > 0.0) {
            return Err(ConfigError::Invalid("rays.max_range must be positive".into()));
        }
        if self.exploration.steering_std < 0.0
            || self.exploration.throttle_std < 0.0
            || !(self.exploration.correlation_time > 0.0)
        {
            return Err(ConfigError::Invalid("exploration noise parameters malformed".into()));
        }
        for channel in SensorChannel::ALL {
            let lc = self.learners.get(channel);
            self.mlp_spec(channel).validate().map_err(|e| {
                ConfigError::Invalid(format!("learners.{channel}: {e}"))
            })?;
            if lc.batch_size == 0 {
                return Err(ConfigError::Invalid(format!(
                    "learners.{channel}.batch_size must be at least 1"
                )));
            }
            if !(lc.learning_rate > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "learners.{channel}.learning_rate must be positive"
                )));
            }
        }
        for w in &self.faults.windows {
            if w.channels.is_empty() {
                return Err(ConfigError::Invalid("fault window with no channels".into()));
            }
            if !(w.end_lap > w.start_lap && w.start_lap >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "fault window laps [{}, {}) malformed",
                    w.start_lap, w.end_lap
                )));
            }
        }
        self.fault_schedule().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn ddp_config(&self) -> DdpConfig {
        DdpConfig {
            horizon: self.expert.horizon,
            dt: self.simulation.dt,
            max_iterations: self.expert.max_iterations,
            lambda_init: self.expert.lambda_init,
            lambda_growth: self.expert.lambda_growth,
            lambda_shrink: self.expert.lambda_shrink,
            lambda_min: self.expert.lambda_min,
            lambda_max: self.expert.lambda_max,
            line_search_steps: self.expert.line_search_steps,
            convergence_tol: self.expert.convergence_tol,
        }
    }

    pub fn ray_sensor_config(&self) -> RaySensorConfig {
        RaySensorConfig {
            ray_count: self.rays.ray_count,
            fan_angle: self.rays.fan_angle_deg.to_radians(),
            max_range: self.rays.max_range,
        }
    }

    pub fn observation_dim(&self, channel: SensorChannel) -> usize {
        match channel {
            SensorChannel::State => 7,
            SensorChannel::LeftRays | SensorChannel::RightRays => self.rays.ray_count,
        }
    }

    pub fn mlp_spec(&self, channel: SensorChannel) -> MlpSpec {
        let lc = self.learners.get(channel);
        MlpSpec {
            input_dim: self.observation_dim(channel),
            hidden_widths: lc.hidden_widths.clone(),
            output_dim: 2,
            activation: Activation::Relu,
            dropout_rate: lc.dropout_rate,
            input_dropout_rate: lc.input_dropout_rate,
            dropout_mode: lc.dropout_mode,
        }
    }

    pub fn train_config(&self, channel: SensorChannel) -> TrainConfig {
        let lc = self.learners.get(channel);
        TrainConfig {
            epochs: lc.epochs,
            adam: AdamParams { learning_rate: lc.learning_rate, ..AdamParams::default() },
            concrete: ConcreteSettings {
                temperature: lc.concrete_temperature,
                weight_reg: lc.concrete_weight_reg,
                dropout_reg: lc.concrete_dropout_reg,
            },
        }
    }

    /// Estimated lap duration used to convert lap-indexed fault windows to
    /// seconds. Actual laps drift slightly (startup, corners); every reported
    /// metric is computed against the realized windows, so the drift is
    /// harmless.
    pub fn lap_time_estimate(&self) -> f64 {
        self.track.length() / self.cost.target_speed
    }

    /// The configured fault windows converted to a per-channel time schedule.
    pub fn fault_schedule(&self) -> FaultSchedule {
        let lap = self.lap_time_estimate();
        let mut schedule = FaultSchedule::empty();
        for w in &self.faults.windows {
            let window = FaultWindow {
                start: w.start_lap * lap,
                end: w.end_lap * lap,
                duty_cycle: w.duty_cycle.unwrap_or(self.faults.duty_cycle),
                burst_period: w.burst_period.unwrap_or(self.faults.burst_period),
            };
            for &channel in &w.channels {
                schedule.channel_mut(channel).push(window);
            }
        }
        schedule
    }

    /// Schedule for the single-learner fragility protocol: the learner's own
    /// channel faulted from `start_lap` to the end of the run.
    pub fn own_fault_schedule(&self, channel: SensorChannel, start_lap: f64) -> FaultSchedule {
        let lap = self.lap_time_estimate();
        let mut schedule = FaultSchedule::empty();
        schedule.channel_mut(channel).push(FaultWindow {
            start: start_lap * lap,
            // Leave generous room past the lap budget.
            end: (self.simulation.lap_budget as f64 + 10.0) * lap,
            duty_cycle: self.faults.duty_cycle,
            burst_period: self.faults.burst_period,
        });
        schedule
    }
}

/// Sub-seed derivation for pipeline components; see [`crate::rng::derive_seed`].
pub fn component_seed(master: u64, component: &str) -> u64 {
    crate::rng::derive_seed(master, component)
}

fn apply_override(doc: &mut toml::Value, key: &str, value: &str) -> Result<(), ConfigError> {
    let parsed: toml::Value = toml::from_str(&format!("v = {value}"))
        .ok()
        .and_then(|t: toml::Value| t.get("v").cloned())
        .or_else(|| {
            // Bare words fall back to strings.
            toml::from_str(&format!("v = \"{value}\""))
                .ok()
                .and_then(|t: toml::Value| t.get("v").cloned())
        })
        .ok_or_else(|| ConfigError::BadOverride {
            key: key.to_string(),
            reason: format!("cannot parse value `{value}`"),
        })?;

    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| ConfigError::BadOverride {
            key: key.to_string(),
            reason: format!("`{}` is not a table", parts[..i].join(".")),
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("key split always yields at least one part")
}
