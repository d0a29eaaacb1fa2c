//! Optimizers, learning-rate schedule, checkpoints and the training loops.

mod checkpoint;
mod config;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::CheckpointState;
pub use config::{parse_pairs, OptimizerKind, ScheduleKind, Task, TrainConfig};
pub use optim::{clip_global_norm, Optimizer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{cosine_annealing_lr, cosine_warm_restart_lr, learning_rate};
pub use trainer::{
    evaluate_model, fit, EpochLoss, EpochRecord, EvalReport, FitOutcome, Score, Trainer, VideoScore,
};

use std::ops::ControlFlow;

use crate::data::VideoRecord;
use crate::ensemble::FoldAssignment;
use crate::error::{Error, Result};

/// Splits `records` into (train, validation) for held-out fold `k`.
/// Videos missing from the assignment are an error.
pub fn fold_partition(
    records: &[VideoRecord],
    folds: &FoldAssignment,
    k: usize,
) -> Result<(Vec<VideoRecord>, Vec<VideoRecord>)> {
    if k >= folds.k {
        return Err(Error::config(format!(
            "fold {k} out of range for K = {}",
            folds.k
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in records {
        match folds.fold_of(&r.video_id) {
            Some(f) if f == k => val.push(r.clone()),
            Some(_) => train.push(r.clone()),
            None => {
                return Err(Error::config(format!(
                    "video `{}` has no fold assignment",
                    r.video_id
                )))
            }
        }
    }
    Ok((train, val))
}

fn run_task(
    expected: Task,
    config: TrainConfig,
    train: &[VideoRecord],
    val: &[VideoRecord],
    on_epoch: impl FnMut(&EpochRecord, &Trainer<f64>) -> Result<ControlFlow<()>>,
) -> Result<FitOutcome> {
    if config.task != expected {
        return Err(Error::config(format!(
            "config task is `{}` but `{expected}` training was requested",
            config.task
        )));
    }
    let first = train
        .first()
        .ok_or_else(|| Error::config("the train split is empty"))?;
    let mut trainer = Trainer::<f64>::new(config, first.feat_dim)?;
    fit(&mut trainer, train, val, on_epoch)
}

/// Trains the stage-1 GRU and Transformer regressor, keeping the state with
/// the best validation CCC.
pub fn train_stage1(
    config: TrainConfig,
    train: &[VideoRecord],
    val: &[VideoRecord],
    on_epoch: impl FnMut(&EpochRecord, &Trainer<f64>) -> Result<ControlFlow<()>>,
) -> Result<FitOutcome> {
    run_task(Task::Stage1, config, train, val, on_epoch)
}

/// Trains the stacker on fold score records (features of width `2K`).
pub fn train_stage2(
    config: TrainConfig,
    train: &[VideoRecord],
    val: &[VideoRecord],
    on_epoch: impl FnMut(&EpochRecord, &Trainer<f64>) -> Result<ControlFlow<()>>,
) -> Result<FitOutcome> {
    if let Some(r) = train.iter().chain(val).find(|r| r.feat_dim % 2 != 0) {
        return Err(Error::config(format!(
            "video `{}` has {}-dim features; fold score vectors are 2K wide",
            r.video_id, r.feat_dim
        )));
    }
    run_task(Task::Stage2, config, train, val, on_epoch)
}

/// Trains the dual-branch action-unit detector with focal loss.
pub fn train_au(
    config: TrainConfig,
    train: &[VideoRecord],
    val: &[VideoRecord],
    on_epoch: impl FnMut(&EpochRecord, &Trainer<f64>) -> Result<ControlFlow<()>>,
) -> Result<FitOutcome> {
    run_task(Task::Au, config, train, val, on_epoch)
}
