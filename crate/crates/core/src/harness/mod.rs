//! End-to-end pipeline: configuration, expert data collection, training,
//! closed-loop runs under fault schedules, and report emission.

pub mod collect;
pub mod config;
pub mod drive;
pub mod logs;
pub mod report;
pub mod train_all;

pub use collect::{collect_dataset, dataset_path, read_dataset, write_dataset, ChannelData, CollectError, CollectOutput};
pub use config::{component_seed, ConfigError, ExperimentConfig, SCHEMA_VERSION};
pub use drive::{run_episode, DriveError, Policy};
pub use logs::{LearnerRecord, LogError, RunEvent, RunLog, RunManifest, TrajectoryRow};
pub use report::{
    emit_report, schedule_windows, segments, summarize, usage_per_lap, usage_table,
    variance_shifts, RunSummary, UsageRow, VarianceShift, WindowKey,
};
pub use train_all::{checkpoint_path, train_all, train_channel, Checkpoint, CheckpointError};

use crate::ensemble::Learner;
use crate::nn::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error("training {channel} failed: {source}")]
    Train { channel: crate::sensors::SensorChannel, source: TrainError },
}

/// In-memory result of collect + train, ready for closed-loop runs.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub collect: CollectOutput,
    pub checkpoints: Vec<Checkpoint>,
}

impl Pipeline {
    pub fn learners(&self) -> Vec<Learner> {
        self.checkpoints.iter().map(Checkpoint::to_learner).collect()
    }
}

/// Collects the configured number of expert laps and trains all three
/// learners with seeds derived from `master_seed`.
pub fn build_pipeline(config: &ExperimentConfig, master_seed: u64) -> Result<Pipeline, PipelineError> {
    let collect = collect_dataset(config, config.simulation.collect_laps, master_seed)?;
    let mut checkpoints = Vec::with_capacity(3);
    for (channel, result) in train_all(config, &collect.datasets, master_seed) {
        match result {
            Ok(ckpt) => checkpoints.push(ckpt),
            Err(source) => return Err(PipelineError::Train { channel, source }),
        }
    }
    Ok(Pipeline { config: config.clone(), master_seed, collect, checkpoints })
}
