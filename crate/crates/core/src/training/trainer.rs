use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::CheckpointState;
use super::config::{Task, TrainConfig};
use super::optim::{clip_global_norm, Optimizer};
use super::schedule::learning_rate;
use crate::data::{window_spans, Labels, SequenceBatch, VideoRecord, WindowRef, AU_COUNT};
use crate::error::{Error, Result};
use crate::metrics::{f1_score, CccResult, F1Average};
use crate::models::{
    au_predict, batch_input, load_params, predict_record, AuFusion, Model, SequenceModel,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Stream id of the batch-shuffling generator, kept apart from the
/// parameter-initialisation stream that shares the run seed.
const SHUFFLE_STREAM: u64 = 1;

/// Headline scores of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Score {
    Va(CccResult),
    Au { f1: f64, f1_t1: f64 },
}

impl Score {
    /// The value model selection maximises: combined CCC or F1.
    pub fn headline(&self) -> f64 {
        match self {
            Score::Va(c) => c.combined,
            Score::Au { f1, .. } => *f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub score: Score,
}

/// Pooled score over all frames of all videos, plus per-video scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pooled: Score,
    pub per_video: Vec<VideoScore>,
}

/// One JSON-lines log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: String,
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub lr: f64,
    pub train: Option<Score>,
    pub val: Option<Score>,
    pub best_epoch: Option<usize>,
    pub elapsed_s: f64,
}

/// Mean loss and per-step losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub mean: f64,
    pub steps: Vec<f64>,
    pub last_lr: f64,
}

/// A model, its optimizer and the run's position: everything a checkpoint
/// stores.
#[derive(Clone, Debug)]
pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub model: Model<S>,
    optimizer: Optimizer<S>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    best: Option<(f64, usize)>,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh run over `d_in`-dimensional inputs.
    pub fn new(config: TrainConfig, d_in: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::build(config.model_spec(d_in), config.seed)?;
        let optimizer = Optimizer::new(config.optimizer, config.momentum, model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
            step: 0,
            best: None,
        })
    }

    pub fn from_checkpoint(ck: &CheckpointState) -> Result<Self> {
        let mut t = Self::new(ck.config.clone(), ck.spec.d_in())?;
        if t.model.spec() != ck.spec {
            return Err(Error::Checkpoint(format!(
                "checkpoint topology `{}` disagrees with its config",
                ck.spec
            )));
        }
        let params: Vec<(String, Tensor<S>)> = ck
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.cast()))
            .collect();
        load_params(t.model.params_mut(), &params)?;
        t.optimizer.load_state(t.model.params(), &ck.optimizer)?;
        t.rng.set_word_pos(ck.rng_word_pos);
        t.epoch = ck.epoch;
        t.step = ck.step;
        t.best = ck.best;
        Ok(t)
    }

    pub fn checkpoint(&self) -> CheckpointState {
        CheckpointState {
            config: self.config.clone(),
            spec: self.model.spec(),
            epoch: self.epoch,
            step: self.step,
            rng_word_pos: self.rng.get_word_pos(),
            best: self.best,
            params: self
                .model
                .params()
                .iter()
                .map(|(n, p)| (n.to_string(), p.cast()))
                .collect(),
            optimizer: self.optimizer.state_tensors(self.model.params()),
        }
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }

    /// Checks that `records` can feed this run's task and model.
    pub fn check_records(&self, records: &[VideoRecord], split: &str) -> Result<()> {
        if records.is_empty() {
            return Err(Error::config(format!("the {split} split is empty")));
        }
        let d_in = self.model.spec().d_in();
        for r in records {
            let ok = matches!(
                (self.config.task, &r.labels),
                (Task::Au, Labels::Au(_)) | (Task::Stage1 | Task::Stage2, Labels::Va(_))
            );
            if !ok {
                let want = if self.config.task == Task::Au {
                    "action-unit"
                } else {
                    "valence/arousal"
                };
                return Err(Error::config(format!(
                    "{split} video `{}` lacks {want} labels needed by task {}",
                    r.video_id, self.config.task
                )));
            }
            if r.feat_dim != d_in {
                return Err(Error::config(format!(
                    "{split} video `{}` has {}-dim features, the model expects {d_in}",
                    r.video_id, r.feat_dim
                )));
            }
        }
        Ok(())
    }

    /// One pass over every training window, in a freshly shuffled order.
    pub fn train_epoch(&mut self, records: &[VideoRecord]) -> Result<EpochLoss> {
        self.check_records(records, "train")?;
        let cfg = &self.config;
        let mut windows = Vec::new();
        for (video, r) in records.iter().enumerate() {
            for span in window_spans(r.n_frames, cfg.window, cfg.stride)? {
                windows.push(WindowRef { video, span });
            }
        }
        windows.shuffle(&mut self.rng);
        let n_batches = windows.len().div_ceil(cfg.batch_size);
        let settings = cfg.loss_settings();
        let mut steps = Vec::with_capacity(n_batches);
        let mut lr = cfg.lr;
        for (b, chunk) in windows.chunks(cfg.batch_size).enumerate() {
            lr = learning_rate(
                &self.config,
                self.epoch as f64 + b as f64 / n_batches as f64,
            );
            let batch = SequenceBatch::collate(records, chunk)?;
            let mut g = Graph::new();
            let p = self.model.params().bind(&mut g);
            let x = batch_input(&mut g, &batch);
            let loss = self.model.loss(&mut g, &p, x, &batch, &settings)?;
            steps.push(g.value(loss).item().as_f64());
            let mut grads = g.backward(loss)?;
            let mut per_param: Vec<Option<Vec<S>>> =
                p.vars().iter().map(|&v| grads.take(v)).collect();
            if self.config.clip_norm > 0.0 {
                clip_global_norm(&mut per_param, self.config.clip_norm);
            }
            self.optimizer
                .step(self.model.params_mut(), &per_param, lr)?;
            self.step += 1;
        }
        self.epoch += 1;
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        Ok(EpochLoss {
            mean,
            steps,
            last_lr: lr,
        })
    }

    pub fn evaluate(&self, records: &[VideoRecord]) -> Result<EvalReport> {
        evaluate_model(
            &self.model,
            records,
            self.config.window,
            self.config.batch_size,
            self.config.threshold,
            self.config.f1_average,
        )
    }
}

/// Scores `model` on labelled videos. VA tasks report CCC, pooled over the
/// concatenation of all frames. AU tasks report F1 for the full fusion and
/// for the T1 branch alone.
pub fn evaluate_model<S: Scalar>(
    model: &Model<S>,
    records: &[VideoRecord],
    window: usize,
    batch: usize,
    threshold: f64,
    average: F1Average,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    match model {
        Model::Au(au) => {
            let mut t1 = au.clone();
            t1.cfg.fusion = AuFusion::T1Only;
            let t1 = Model::Au(t1);
            let (mut all_p, mut all_p1, mut all_y) = (Vec::new(), Vec::new(), Vec::new());
            let mut per_video = Vec::new();
            for r in records {
                let y: Vec<u8> = r
                    .au_labels()
                    .ok_or_else(|| {
                        Error::config(format!("video `{}` has no action-unit labels", r.video_id))
                    })?
                    .iter()
                    .flatten()
                    .copied()
                    .collect();
                let p = au_predict(&predict_record(model, r, window, batch)?, threshold);
                let p1 = au_predict(&predict_record(&t1, r, window, batch)?, threshold);
                per_video.push(VideoScore {
                    video_id: r.video_id.clone(),
                    score: Score::Au {
                        f1: f1_score(&p, &y, AU_COUNT, average)?,
                        f1_t1: f1_score(&p1, &y, AU_COUNT, average)?,
                    },
                });
                all_p.extend(p);
                all_p1.extend(p1);
                all_y.extend(y);
            }
            Ok(EvalReport {
                pooled: Score::Au {
                    f1: f1_score(&all_p, &all_y, AU_COUNT, average)?,
                    f1_t1: f1_score(&all_p1, &all_y, AU_COUNT, average)?,
                },
                per_video,
            })
        }
        _ => {
            let (mut all_p, mut all_y) = (Vec::new(), Vec::new());
            let mut per_video = Vec::new();
            for r in records {
                let y: Vec<[f64; 2]> = r
                    .va_labels()
                    .ok_or_else(|| {
                        Error::config(format!(
                            "video `{}` has no valence/arousal labels",
                            r.video_id
                        ))
                    })?
                    .iter()
                    .map(|l| [l[0] as f64, l[1] as f64])
                    .collect();
                let p: Vec<[f64; 2]> = predict_record(model, r, window, batch)?
                    .chunks(2)
                    .map(|c| [c[0], c[1]])
                    .collect();
                if r.n_frames >= 2 {
                    per_video.push(VideoScore {
                        video_id: r.video_id.clone(),
                        score: Score::Va(CccResult::from_frames(&p, &y)?),
                    });
                }
                all_p.extend(p);
                all_y.extend(y);
            }
            Ok(EvalReport {
                pooled: Score::Va(CccResult::from_frames(&all_p, &all_y)?),
                per_video,
            })
        }
    }
}

/// Result of [`fit`]. `best` is `None` only when a resumed run never beat
/// the score it resumed with.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Option<CheckpointState>,
    pub last: CheckpointState,
    pub history: Vec<EpochRecord>,
}

/// Trains until `config.epochs` epochs are complete, scoring `val` after
/// each epoch and keeping the best-scoring state. Without validation videos
/// the latest epoch counts as best. `on_epoch` sees every log record and
/// may stop the run early.
pub fn fit<S: Scalar>(
    trainer: &mut Trainer<S>,
    train: &[VideoRecord],
    val: &[VideoRecord],
    mut on_epoch: impl FnMut(&EpochRecord, &Trainer<S>) -> Result<ControlFlow<()>>,
) -> Result<FitOutcome> {
    trainer.check_records(train, "train")?;
    if !val.is_empty() {
        trainer.check_records(val, "validation")?;
    }
    let start = Instant::now();
    let mut best = None;
    let mut history = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let loss = trainer.train_epoch(train)?;
        let train_score = if trainer.config.eval_train {
            Some(trainer.evaluate(train)?.pooled)
        } else {
            None
        };
        let val_score = if val.is_empty() {
            None
        } else {
            Some(trainer.evaluate(val)?.pooled)
        };
        let improved = val_score.is_none_or(|s| trainer.best.is_none_or(|(b, _)| s.headline() > b));
        if improved {
            if let Some(s) = val_score {
                trainer.best = Some((s.headline(), trainer.epoch));
            }
            best = Some(trainer.checkpoint());
        }
        let record = EpochRecord {
            task: trainer.config.task.to_string(),
            epoch: trainer.epoch,
            steps: trainer.step,
            train_loss: loss.mean,
            lr: loss.last_lr,
            train: train_score,
            val: val_score,
            best_epoch: trainer.best.map(|(_, e)| e),
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.5} lr {:.2e} val {:?}",
            record.epoch,
            record.train_loss,
            record.lr,
            record.val.map(|s| s.headline())
        );
        let flow = on_epoch(&record, trainer)?;
        history.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(FitOutcome {
        best,
        last: trainer.checkpoint(),
        history,
    })
}
