//! End-to-end steps shared by the command line and the test suites, so both
//! derive identical data from one configuration and seed.

use thiserror::Error;

use crate::baselines::{compare_models, BaselineError, ComparisonReport};
use crate::config::ExperimentConfig;
use crate::controller::{generate_series, generate_sets, ControllerError, ExperimentMode, Scenario};
use crate::dataset::{build_samples, DatasetError, RawRecord};
use crate::rng::derive_seed;
use crate::training::{train_with_progress, EpochRecord, TrainError, TrainedModel};

const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_COMPARE_SERIES: u64 = 3;
const STREAM_COMPARE_INIT: u64 = 4;
const STREAM_CHANNEL: u64 = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// `cfg.sets` consecutive segments of `cfg.points` scan-tracked records.
pub fn training_sets(cfg: &ExperimentConfig, seed: u64) -> Vec<Vec<RawRecord>> {
    generate_sets(
        &cfg.drift(),
        &cfg.optical(),
        &cfg.scan(),
        cfg.slot_seconds,
        cfg.sets,
        cfg.points,
        derive_seed(seed, STREAM_DATA),
    )
}

pub fn train_on_sets(
    cfg: &ExperimentConfig,
    sets: &[Vec<RawRecord>],
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel, PipelineError> {
    let sequences = sets
        .iter()
        .enumerate()
        .map(|(i, s)| build_samples(s, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(train_with_progress(&sequences, &cfg.train(), derive_seed(seed, STREAM_INIT), on_epoch)?)
}

/// The series the model comparison runs on, sampled every
/// `compare_sample_seconds`.
pub fn comparison_series(cfg: &ExperimentConfig, seed: u64) -> Vec<RawRecord> {
    generate_series(
        &cfg.drift_for(cfg.compare_regime),
        &cfg.optical(),
        &cfg.scan(),
        cfg.compare_sample_seconds,
        cfg.compare_points,
        derive_seed(seed, STREAM_COMPARE_SERIES),
    )
}

pub fn compare(cfg: &ExperimentConfig, series: &[RawRecord], seed: u64) -> Result<ComparisonReport, PipelineError> {
    Ok(compare_models(series, &cfg.compare(), derive_seed(seed, STREAM_COMPARE_INIT))?)
}

pub fn scenario(cfg: &ExperimentConfig, days: f64, seed: u64, mode: ExperimentMode) -> Scenario {
    Scenario {
        drift: cfg.drift(),
        optical: cfg.optical(),
        controller: cfg.controller(),
        days,
        seed: derive_seed(seed, STREAM_CHANNEL),
        mode,
    }
}
