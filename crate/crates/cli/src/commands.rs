use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use affect_core::data::{
    read_video_file, synth_generate, synth_generate_au, write_scores, write_video_file, Manifest,
    ManifestEntry, ScoreKind, Split, SynthSpec, VideoRecord, VideoScores,
};
use affect_core::diagnostics::{gradient_suite, GRAD_TOLERANCE};
use affect_core::ensemble::{
    average_folds, build_fold_scores, infer_fold_scores, kfold_split, FoldAssignment,
};
use affect_core::metrics::CccResult;
use affect_core::models::{load_params, predict_record, Model, SequenceModel};
use affect_core::training::{
    evaluate_model, fit, fold_partition, CheckpointState, Score, Task, TrainConfig, Trainer,
};
use affect_core::{Error, Result};

use crate::table::{fmt3, markdown_table};
use crate::{
    load_config, Command, EvaluateArgs, GradCheckArgs, InferArgs, LabelKind, ReportArgs, SplitArgs,
    Stage1Args, SynthArgs, TrainArgs,
};

pub fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::TrainStage1(a) => train_stage1(a),
        Command::InferFolds(a) => infer_folds(a),
        Command::TrainStage2(a) => train_simple(a, Task::Stage2),
        Command::TrainAu(a) => train_simple(a, Task::Au),
        Command::Evaluate(a) => evaluate(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Report(a) => report(a),
    }
    .map(|()| 0)
    .or_else(|e| match e {
        Failed => Ok(1),
        Core(e) => Err(e),
    })
}

/// Command outcome: a hard error, or a run that completed but must exit
/// non-zero (a failed gradient audit).
enum Outcome {
    Failed,
    Core(Error),
}
use Outcome::{Core, Failed};

impl From<Error> for Outcome {
    fn from(e: Error) -> Self {
        Core(e)
    }
}

type CmdResult = std::result::Result<(), Outcome>;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn print_settings(cmd: &str, pairs: &[(&str, String)]) {
    println!("# affect {cmd}");
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
    println!();
}

fn print_config(cmd: &str, cfg: &TrainConfig) {
    println!("# affect {cmd}");
    print!("{cfg}");
    println!();
}

fn load_records<'a>(entries: impl Iterator<Item = &'a ManifestEntry>) -> Result<Vec<VideoRecord>> {
    entries
        .map(|e| {
            let r = read_video_file(&e.path)?;
            if r.video_id != e.video_id {
                return Err(Error::Contract(format!(
                    "{} holds video `{}` but the manifest lists `{}`",
                    e.path.display(),
                    r.video_id,
                    e.video_id
                )));
            }
            Ok(r)
        })
        .collect()
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

/// Fold assignment of the manifest's training videos.
fn manifest_folds(m: &Manifest) -> Result<FoldAssignment> {
    let mut folds = BTreeMap::new();
    for e in m.split(Split::Train) {
        let f = e.fold.ok_or_else(|| {
            Error::Config(format!(
                "train video `{}` has no fold; run `affect split` first",
                e.video_id
            ))
        })?;
        folds.insert(e.video_id.clone(), f);
    }
    let k = folds.values().max().map_or(0, |&f| f + 1);
    if k < 2 {
        return Err(Error::Config(
            "manifest needs at least 2 folds of training videos".into(),
        ));
    }
    let a = FoldAssignment { k, folds };
    if let Some(empty) = a.sizes().iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "fold {empty} has no training videos"
        )));
    }
    Ok(a)
}

fn fold_checkpoint(models: &Path, k: usize) -> PathBuf {
    models.join(format!("fold{k}")).join("best.afck")
}

/// Loads `fold{k}/best.afck` for every fold, naming all missing ones at once.
fn load_fold_models(models: &Path, k: usize) -> Result<Vec<(CheckpointState, Model<f64>)>> {
    let missing: Vec<String> = (0..k)
        .filter(|&f| !fold_checkpoint(models, f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(io_err(
            models,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!(
                    "missing checkpoint for fold(s) {} of {k}",
                    missing.join(", ")
                ),
            ),
        ));
    }
    (0..k)
        .map(|f| load_model(&fold_checkpoint(models, f)))
        .collect()
}

fn load_model(path: &Path) -> Result<(CheckpointState, Model<f64>)> {
    let ck = CheckpointState::load(path)?;
    let mut model = Model::<f64>::build(ck.spec, ck.config.seed)?;
    load_params(model.params_mut(), &ck.params)?;
    Ok((ck, model))
}

fn synth(a: &SynthArgs) -> CmdResult {
    print_settings(
        "synth",
        &[
            ("videos", a.videos.to_string()),
            ("frames", a.frames.to_string()),
            ("dim", a.dim.to_string()),
            ("seed", a.seed.to_string()),
            ("labels", format!("{:?}", a.labels).to_lowercase()),
            ("val_videos", a.val_videos.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    if a.val_videos >= a.videos {
        return Err(Error::Config(format!(
            "--val-videos {} leaves no training videos out of {}",
            a.val_videos, a.videos
        ))
        .into());
    }
    let spec = SynthSpec::new(a.videos, a.frames, a.dim, a.seed);
    let records = match a.labels {
        LabelKind::Va => synth_generate(&spec)?,
        LabelKind::Au => synth_generate_au(&spec)?,
    };
    create_dir(&a.out)?;
    let mut entries = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let path = a.out.join(format!("{}.afb1", r.video_id));
        write_video_file(&path, r)?;
        let split = if i + a.val_videos >= a.videos {
            Split::Val
        } else {
            Split::Train
        };
        entries.push(ManifestEntry {
            video_id: r.video_id.clone(),
            path,
            split,
            fold: None,
        });
    }
    let manifest = a.out.join("manifest.tsv");
    Manifest::new(entries)?.save(&manifest)?;
    println!("wrote {} videos and {}", records.len(), manifest.display());
    Ok(())
}

fn split(a: &SplitArgs) -> CmdResult {
    let out = a.out.clone().unwrap_or_else(|| a.manifest.clone());
    print_settings(
        "split",
        &[
            ("manifest", a.manifest.display().to_string()),
            ("k", a.k.to_string()),
            ("seed", a.seed.to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let mut m = Manifest::load(&a.manifest)?;
    let ids: Vec<String> = m.split(Split::Train).map(|e| e.video_id.clone()).collect();
    let folds = kfold_split(&ids, a.k, a.seed)?;
    for e in &mut m.entries {
        e.fold = folds.fold_of(&e.video_id);
    }
    m.save(&out)?;
    let sizes: Vec<String> = folds.sizes().iter().map(|s| s.to_string()).collect();
    println!("fold sizes: {}", sizes.join(" "));
    Ok(())
}

/// Resolves the run config: a fresh config, or the checkpoint's own with
/// `--set` overrides applied on top.
fn resolve(args: &TrainArgs, task: Task) -> Result<(TrainConfig, Option<CheckpointState>)> {
    match &args.resume {
        None => Ok((
            load_config(args.config.as_deref(), task, &args.overrides)?,
            None,
        )),
        Some(path) => {
            if args.config.is_some() {
                return Err(Error::Config(
                    "--config cannot be combined with --resume".into(),
                ));
            }
            let mut ck = CheckpointState::load(path)?;
            for o in &args.overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
                ck.config.set(k.trim(), v.trim())?;
            }
            ck.config.validate()?;
            if ck.config.task != task {
                return Err(Error::Config(format!(
                    "{} holds a `{}` run, not `{task}`",
                    path.display(),
                    ck.config.task
                )));
            }
            Ok((ck.config.clone(), Some(ck)))
        }
    }
}

/// Trains one model, writing `best.afck`, `last.afck` and `log.jsonl`.
fn train_one(
    cmd: &str,
    cfg: TrainConfig,
    resume: Option<CheckpointState>,
    train: &[VideoRecord],
    val: &[VideoRecord],
    out: &Path,
) -> Result<()> {
    print_config(cmd, &cfg);
    let first = train
        .first()
        .ok_or_else(|| Error::Config("the train split is empty".into()))?;
    let mut trainer = match &resume {
        Some(ck) => Trainer::<f64>::from_checkpoint(ck)?,
        None => Trainer::<f64>::new(cfg.clone(), first.feat_dim)?,
    };
    trainer.config = cfg;
    create_dir(out)?;
    let log_path = out.join("log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let last_path = out.join("last.afck");
    let outcome = fit(&mut trainer, train, val, |rec, t| {
        let line = serde_json::to_string(rec).map_err(|e| Error::Contract(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?;
        t.checkpoint().save(&last_path)?;
        println!("{}", describe_epoch(rec));
        Ok(ControlFlow::Continue(()))
    })?;
    outcome.last.save(&last_path)?;
    if let Some(best) = &outcome.best {
        best.save(out.join("best.afck"))?;
    }
    match trainer.best() {
        Some((m, e)) => println!("best validation score {m:.4} at epoch {e}"),
        None => println!("no validation split; best.afck is the final epoch"),
    }
    Ok(())
}

fn describe_epoch(r: &affect_core::training::EpochRecord) -> String {
    let score = |s: &Option<Score>| match s {
        Some(Score::Va(c)) => format!("V {:.4} A {:.4} VA {:.4}", c.ccc_v, c.ccc_a, c.combined),
        Some(Score::Au { f1, f1_t1 }) => format!("F1 {f1:.4} (T1 {f1_t1:.4})"),
        None => "-".into(),
    };
    format!(
        "epoch {:>3}  loss {:.5}  lr {:.2e}  train [{}]  val [{}]",
        r.epoch,
        r.train_loss,
        r.lr,
        score(&r.train),
        score(&r.val)
    )
}

fn train_stage1(a: &Stage1Args) -> CmdResult {
    let (cfg, resume) = resolve(&a.train, Task::Stage1)?;
    if resume.is_some() && a.fold.is_none() {
        return Err(Error::Config("--resume needs --fold".into()).into());
    }
    let m = Manifest::load(&a.train.manifest)?;
    let folds = manifest_folds(&m)?;
    let records = load_records(m.split(Split::Train))?;
    let which: Vec<usize> = match a.fold {
        Some(k) if k >= folds.k => {
            return Err(
                Error::Config(format!("--fold {k} out of range for K = {}", folds.k)).into(),
            )
        }
        Some(k) => vec![k],
        None => (0..folds.k).collect(),
    };
    for k in which {
        let (train, val) = fold_partition(&records, &folds, k)?;
        let out = a.train.out.join(format!("fold{k}"));
        println!(
            "== fold {k}: {} train, {} validation videos",
            train.len(),
            val.len()
        );
        train_one(
            "train-stage1",
            cfg.clone(),
            resume.clone(),
            &train,
            &val,
            &out,
        )?;
    }
    Ok(())
}

fn train_simple(a: &TrainArgs, task: Task) -> CmdResult {
    let (cfg, resume) = resolve(a, task)?;
    let m = Manifest::load(&a.manifest)?;
    let train = load_records(m.split(Split::Train))?;
    let val = load_records(m.split(Split::Val))?;
    let cmd = if task == Task::Au {
        "train-au"
    } else {
        "train-stage2"
    };
    train_one(cmd, cfg, resume, &train, &val, &a.out)?;
    Ok(())
}

fn infer_folds(a: &InferArgs) -> CmdResult {
    print_settings(
        "infer-folds",
        &[
            ("manifest", a.manifest.display().to_string()),
            ("models", a.models.display().to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let m = Manifest::load(&a.manifest)?;
    let k = manifest_folds(&m)?.k;
    let loaded = load_fold_models(&a.models, k)?;
    let (window, batch) = (loaded[0].0.config.window, loaded[0].0.config.batch_size);
    let models: Vec<Model<f64>> = loaded.into_iter().map(|(_, m)| m).collect();
    create_dir(&a.out)?;
    let mut entries = Vec::new();
    let mut per_fold: Vec<Vec<VideoScores>> = vec![Vec::new(); k];
    for e in &m.entries {
        let rec = load_records(std::iter::once(e))?.remove(0);
        let scores = infer_fold_scores(&models, &rec, window, batch)?;
        for (f, out) in per_fold.iter_mut().enumerate() {
            out.push(VideoScores::from_va(&rec.video_id, &scores.fold(f)));
        }
        let path = a.out.join(format!("{}.afb1", rec.video_id));
        write_video_file(&path, &scores.to_record(rec.labels.clone())?)?;
        entries.push(ManifestEntry { path, ..e.clone() });
    }
    for (f, videos) in per_fold.iter().enumerate() {
        write_scores(a.out.join(format!("fold{f}.csv")), ScoreKind::Va, videos)?;
    }
    let manifest = a.out.join("manifest.tsv");
    Manifest::new(entries)?.save(&manifest)?;
    println!(
        "wrote {}-dim fold score vectors for {} videos and {}",
        2 * k,
        m.entries.len(),
        manifest.display()
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let split = parse_split(&a.split)?;
    let (ck, model) = load_model(&a.checkpoint)?;
    print_config("evaluate", &ck.config);
    let m = Manifest::load(&a.manifest)?;
    let records = load_records(m.split(split))?;
    if records.is_empty() {
        return Err(Error::Config(format!("manifest has no `{split}` videos")).into());
    }
    let cfg = &ck.config;
    let report = evaluate_model(
        &model,
        &records,
        cfg.window,
        cfg.batch_size,
        cfg.threshold,
        cfg.f1_average,
    )?;

    let mut rows = Vec::new();
    let header: &[&str] = match report.pooled {
        Score::Va(_) => &["Video", "Valence", "Arousal", "Combined"],
        Score::Au { .. } => &["Video", "F1", "F1 (T1 only)"],
    };
    let row = |s: &Score| match s {
        Score::Va(c) => vec![fmt3(c.ccc_v), fmt3(c.ccc_a), fmt3(c.combined)],
        Score::Au { f1, f1_t1 } => vec![fmt3(*f1), fmt3(*f1_t1)],
    };
    for v in &report.per_video {
        rows.push([vec![v.video_id.clone()], row(&v.score)].concat());
    }
    rows.push([vec!["Pooled".to_string()], row(&report.pooled)].concat());
    print!("{}", markdown_table(header, &rows));

    if let Some(path) = &a.scores {
        let kind = if model.d_out() == 2 {
            ScoreKind::Va
        } else {
            ScoreKind::Au
        };
        let videos = records
            .iter()
            .map(|r| {
                Ok(VideoScores {
                    video_id: r.video_id.clone(),
                    values: predict_record(&model, r, cfg.window, cfg.batch_size)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_scores(path, kind, &videos)?;
    }
    if let Some(path) = &a.json {
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| Error::Contract(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> CmdResult {
    print_settings(
        "grad-check",
        &[
            ("seed", a.seed.to_string()),
            ("tolerance", format!("{GRAD_TOLERANCE:e}")),
        ],
    );
    let checks = gradient_suite(a.seed)?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                format!("{:?}", c.shape),
                format!("{:.3e}", c.max_error),
                if c.passed() { "ok" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        markdown_table(&["Layer", "Input shape", "Max rel. error", "Status"], &rows)
    );
    if checks.iter().all(|c| c.passed()) {
        Ok(())
    } else {
        Err(Failed)
    }
}

fn report(a: &ReportArgs) -> CmdResult {
    let split = parse_split(&a.split)?;
    print_settings(
        "report",
        &[
            ("manifest", a.manifest.display().to_string()),
            ("models", a.models.display().to_string()),
            ("split", split.to_string()),
        ],
    );
    let m = Manifest::load(&a.manifest)?;
    let k = manifest_folds(&m)?.k;
    let loaded = load_fold_models(&a.models, k)?;
    let records = load_records(m.split(split))?;
    if records.is_empty() {
        return Err(Error::Config(format!("manifest has no `{split}` videos")).into());
    }
    let mut rows = Vec::new();
    let ccc_row =
        |name: String, c: CccResult| vec![name, fmt3(c.ccc_v), fmt3(c.ccc_a), fmt3(c.combined)];
    for (f, (ck, model)) in loaded.iter().enumerate() {
        let c = &ck.config;
        match evaluate_model(
            model,
            &records,
            c.window,
            c.batch_size,
            c.threshold,
            c.f1_average,
        )?
        .pooled
        {
            Score::Va(ccc) => rows.push(ccc_row(f.to_string(), ccc)),
            Score::Au { .. } => {
                return Err(Error::Config(format!(
                    "fold {f} checkpoint is not a valence/arousal model"
                ))
                .into())
            }
        }
    }
    let (window, batch) = (loaded[0].0.config.window, loaded[0].0.config.batch_size);
    let models: Vec<&Model<f64>> = loaded.iter().map(|(_, m)| m).collect();
    let (mut pred, mut label) = (Vec::new(), Vec::new());
    for r in &records {
        let per_fold = models
            .iter()
            .map(|m| {
                Ok(predict_record(*m, r, window, batch)?
                    .chunks(2)
                    .map(|c| [c[0], c[1]])
                    .collect())
            })
            .collect::<Result<Vec<Vec<[f64; 2]>>>>()?;
        pred.extend(average_folds(&build_fold_scores(&r.video_id, &per_fold)?));
        let y = r.va_labels().ok_or_else(|| {
            Error::Config(format!(
                "video `{}` has no valence/arousal labels",
                r.video_id
            ))
        })?;
        label.extend(y.iter().map(|l| [l[0] as f64, l[1] as f64]));
    }
    rows.push(ccc_row(
        "Average".into(),
        CccResult::from_frames(&pred, &label)?,
    ));
    let table = markdown_table(&["Fold", "Valence", "Arousal", "Combined"], &rows);
    print!("{table}");
    if let Some(path) = &a.out {
        fs::write(path, &table).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
