//! Training pipeline: one learner per sensor channel, independent derived
//! seeds, versioned JSON checkpoints.

use super::collect::ChannelData;
use super::config::{component_seed, ExperimentConfig, SCHEMA_VERSION};
use crate::ensemble::Learner;
use crate::nn::{train, Mlp, Normalizer, TrainBatch, TrainError, TrainResult};
use crate::rng;
use crate::sensors::SensorChannel;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint schema_version {0}")]
    SchemaVersion(u32),
}

/// Versioned training artifact: spec and parameters (inside [`Mlp`]),
/// normalization constants, seed, and the loss history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub channel: SensorChannel,
    pub seed: u64,
    pub config_sha1: String,
    pub normalizer: Normalizer,
    pub loss_history: Vec<f64>,
    pub s_clamp_events: usize,
    pub mlp: Mlp,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let checkpoint: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if checkpoint.schema_version != SCHEMA_VERSION {
            return Err(CheckpointError::SchemaVersion(checkpoint.schema_version));
        }
        Ok(checkpoint)
    }

    pub fn to_learner(&self) -> Learner {
        Learner { channel: self.channel, mlp: self.mlp.clone(), normalizer: self.normalizer.clone() }
    }
}

pub fn checkpoint_path(dir: &Path, channel: SensorChannel) -> std::path::PathBuf {
    dir.join(format!("{channel}.json"))
}

/// Trains one channel: standardizes inputs on the training set, shuffles the
/// example order once with a derived stream, batches, and runs the optimizer.
pub fn train_channel(
    config: &ExperimentConfig,
    data: &ChannelData,
    master_seed: u64,
) -> Result<Checkpoint, TrainError> {
    let channel = data.channel;
    let seed = component_seed(master_seed, &format!("train/{channel}"));
    let spec = config.mlp_spec(channel);
    let train_cfg = config.train_config(channel);
    let batch_size = config.learners.get(channel).batch_size;

    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let normalizer = Normalizer::fit(&data.observations);

    // One seeded example-order shuffle decorrelates the time-ordered rows;
    // the per-epoch batch-order shuffle happens inside `train`.
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::stream(component_seed(seed, "shuffle"));
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        batches.push(TrainBatch {
            inputs: chunk.iter().map(|&i| normalizer.apply(&data.observations[i])).collect(),
            targets: chunk.iter().map(|&i| data.controls[i].to_vec()).collect(),
        });
    }

    let TrainResult { mlp, loss_curve, s_clamp_events } = train(&spec, &batches, &train_cfg, seed)?;
    Ok(Checkpoint {
        schema_version: SCHEMA_VERSION,
        channel,
        seed,
        config_sha1: config.content_hash(),
        normalizer,
        loss_history: loss_curve,
        s_clamp_events,
        mlp,
    })
}

/// Trains the three learners concurrently with independent derived seeds.
/// A diverging learner does not abort the others; results come back in
/// channel order.
pub fn train_all(
    config: &ExperimentConfig,
    datasets: &[ChannelData],
    master_seed: u64,
) -> Vec<(SensorChannel, Result<Checkpoint, TrainError>)> {
    assert_eq!(datasets.len(), 3, "expected one dataset per channel");
    let mut results: Vec<Option<(SensorChannel, Result<Checkpoint, TrainError>)>> =
        vec![None, None, None];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (data, slot) in datasets.iter().zip(results.iter_mut()) {
            handles.push(scope.spawn(move || {
                *slot = Some((data.channel, train_channel(config, data, master_seed)));
            }));
        }
        for h in handles {
            h.join().expect("training thread panicked");
        }
    });
    results.into_iter().map(Option::unwrap).collect()
}
