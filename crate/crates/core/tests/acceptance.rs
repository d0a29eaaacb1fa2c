//! Acceptance suite. Runs every criterion in order, prints one `[PASS]` or
//! `[FAIL]` line each, and exits non-zero if any failed.

use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use affect_core::data::{synth_generate, synth_generate_au, Labels, SynthSpec, VideoRecord};
use affect_core::diagnostics::{gradient_suite, GRAD_TOLERANCE};
use affect_core::ensemble::{average_folds, build_fold_scores, FoldScoreSequence};
use affect_core::losses::focal_loss;
use affect_core::metrics::{ccc, f1_macro, va_combined, CccResult};
use affect_core::models::{AuConfig, AuFusion, AuModel, SequenceModel};
use affect_core::training::{
    cosine_warm_restart_lr, train_au, train_stage1, train_stage2, CheckpointState, Score, Task,
    TrainConfig, Trainer,
};
use affect_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Fail(String);

impl From<affect_core::Error> for Fail {
    fn from(e: affect_core::Error) -> Self {
        Fail(e.to_string())
    }
}

type Outcome = Result<String, Fail>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), Fail> {
    if ok {
        Ok(())
    } else {
        Err(Fail(msg.into()))
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), Fail> {
    ensure(
        elapsed < limit,
        format!("{what} took {elapsed:.1?}, limit {limit:?}"),
    )
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    let mut count = 0;
    for seed in 0..5 {
        for c in gradient_suite(seed)? {
            ensure(
                c.passed(),
                format!("seed {seed} {} error {:.3e}", c.name, c.max_error),
            )?;
            ensure(
                c.shape[0] <= 2 && c.shape[1] <= 8 && c.shape[2] <= 8,
                format!("{} ran on {:?}", c.name, c.shape),
            )?;
            worst = worst.max(c.max_error);
            names.push(c.name);
            count += 1;
        }
    }
    for needed in [
        "gru/1-layer",
        "gru/2-layer",
        "gru/3-layer",
        "gru/4-layer",
        "transformer-block",
        "local-attention/w=0",
        "local-attention/w=2",
        "local-attention/w=5",
        "va-head",
        "au-dual-branch",
        "ccc-loss",
        "focal-loss",
    ] {
        ensure(
            names.iter().any(|n| n == needed),
            format!("no check for {needed}"),
        )?;
    }
    within(start.elapsed(), Duration::from_secs(60), "gradient suite")?;
    Ok(format!(
        "{count} checks, max rel. error {:.2e} <= {GRAD_TOLERANCE:e}, {:.1?}",
        worst,
        start.elapsed()
    ))
}

/// Two-pass scalar CCC: means first, then centred sums.
fn ccc_two_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..x.len() {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = sxx / n + syy / n + (mx - my) * (mx - my);
    if denom == 0.0 {
        0.0
    } else {
        2.0 * (sxy / n) / denom
    }
}

fn ccc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(2..=200);
        let shift: f64 = rng.random_range(-0.5..0.5);
        let scale: f64 = rng.random_range(0.1..2.0);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| scale * v + shift + rng.random_range(-0.5..0.5))
            .collect();
        let got = ccc(&x, &y)?;
        let want = ccc_two_pass(&x, &y);
        worst = worst.max((got - want).abs());
        ensure(
            (got - want).abs() <= 1e-9,
            format!("case {case}: {got} vs {want}"),
        )?;
        ensure(ccc(&y, &x)? == got, format!("case {case}: not symmetric"))?;
        ensure(
            got.abs() <= 1.0,
            format!("case {case}: |ccc| = {}", got.abs()),
        )?;
    }
    Ok(format!("1000 pairs, max |diff| {worst:.1e}"))
}

fn combined_anchor() -> Outcome {
    let got = va_combined(0.31f64, 0.17);
    ensure(got == 0.24, format!("va_combined(0.31, 0.17) = {got:?}"))?;
    Ok(format!("va_combined(0.31, 0.17) = {got}"))
}

fn bce(prob: &[f64], bits: &[u8]) -> f64 {
    let total: f64 = prob
        .iter()
        .zip(bits)
        .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    total / prob.len() as f64
}

/// Counts per class with nested loops; an empty class scores zero.
fn macro_f1_brute(pred: &[u8], target: &[u8], rows: usize, classes: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for r in 0..rows {
            let (p, t) = (pred[r * classes + c], target[r * classes + c]);
            if p == 1 && t == 1 {
                tp += 1;
            } else if p == 1 {
                fp += 1;
            } else if t == 1 {
                fn_ += 1;
            }
        }
        let denom = 2 * tp + fp + fn_;
        sum += if denom == 0 {
            0.0
        } else {
            (2 * tp) as f64 / denom as f64
        };
    }
    sum / classes as f64
}

fn focal_and_f1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(1..=64);
        let prob: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let bits: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(vec![n], prob.clone())?);
        let l = focal_loss(&mut g, p, &bits, 0.0, 1.0)?;
        let got = g.value(l).data()[0];
        let want = bce(&prob, &bits);
        worst = worst.max((got - want).abs());
        ensure(
            (got - want).abs() <= 1e-9,
            format!("batch {case}: focal {got} vs BCE {want}"),
        )?;
    }
    for case in 0..100 {
        let density: f64 = rng.random_range(0.05..0.6);
        let pred: Vec<u8> = (0..600)
            .map(|_| u8::from(rng.random_bool(density)))
            .collect();
        let target: Vec<u8> = (0..600)
            .map(|_| u8::from(rng.random_bool(density)))
            .collect();
        let got = f1_macro(&pred, &target, 12)?;
        let want = macro_f1_brute(&pred, &target, 50, 12);
        ensure(
            got == want,
            format!("case {case}: macro F1 {got} vs {want}"),
        )?;
    }
    Ok(format!(
        "focal(γ=0, α=1) vs BCE max |diff| {worst:.1e}; 100 macro-F1 cases exact"
    ))
}

fn train_score(s: &Option<Score>) -> f64 {
    s.as_ref().map_or(f64::NAN, Score::headline)
}

fn stage1_overfit() -> Outcome {
    let start = Instant::now();
    let data = synth_generate(&SynthSpec::default())?;
    let cfg = TrainConfig {
        epochs: 200,
        eval_train: true,
        ..TrainConfig::defaults(Task::Stage1)
    };
    let mut reached = None;
    let mut best = f64::NEG_INFINITY;
    train_stage1(cfg, &data, &[], |r, _| {
        let s = train_score(&r.train);
        best = best.max(s);
        if s >= 0.90 {
            reached = Some((r.epoch, s));
            return Ok(ControlFlow::Break(()));
        }
        Ok(ControlFlow::Continue(()))
    })?;
    let (epoch, score) =
        reached.ok_or_else(|| Fail(format!("best train P_VA {best:.4} after 200 epochs")))?;
    within(start.elapsed(), Duration::from_secs(600), "stage-1 overfit")?;
    Ok(format!(
        "train P_VA {score:.4} at epoch {epoch}, {:.1?}",
        start.elapsed()
    ))
}

/// Fold score records whose K streams are the labels plus Gaussian noise.
fn noisy_fold_records(
    data: &[VideoRecord],
    k: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<VideoRecord>, Fail> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma");
    let mut out = Vec::new();
    for r in data {
        let y = r
            .va_labels()
            .ok_or_else(|| Fail("synthetic video without VA labels".into()))?;
        let folds: Vec<Vec<[f64; 2]>> = (0..k)
            .map(|_| {
                y.iter()
                    .map(|l| {
                        let v = (l[0] as f64 + noise.sample(&mut rng)).clamp(-1.0, 1.0);
                        let a = (l[1] as f64 + noise.sample(&mut rng)).clamp(-1.0, 1.0);
                        [v, a]
                    })
                    .collect()
            })
            .collect();
        out.push(build_fold_scores(&r.video_id, &folds)?.to_record(r.labels.clone())?);
    }
    Ok(out)
}

fn pooled_labels(records: &[VideoRecord]) -> Vec<[f64; 2]> {
    records
        .iter()
        .flat_map(|r| {
            r.va_labels()
                .unwrap()
                .iter()
                .map(|l| [l[0] as f64, l[1] as f64])
        })
        .collect()
}

fn ensemble_benefit() -> Outcome {
    let start = Instant::now();
    let k = 5;
    let data = synth_generate(&SynthSpec::default())?;
    let records = noisy_fold_records(&data, k, 0.3, 7)?;
    let (train, val) = records.split_at(32);
    let labels = pooled_labels(val);
    let seqs: Vec<FoldScoreSequence> = val
        .iter()
        .map(FoldScoreSequence::from_record)
        .collect::<Result<_, _>>()?;

    let averaged: Vec<[f64; 2]> = seqs.iter().flat_map(average_folds).collect();
    let baseline = CccResult::from_frames(&averaged, &labels)?.combined;
    let mut single = Vec::new();
    for f in 0..k {
        let stream: Vec<[f64; 2]> = seqs.iter().flat_map(|s| s.fold(f)).collect();
        let c = CccResult::from_frames(&stream, &labels)?.combined;
        ensure(
            baseline > c,
            format!("fold {f} CCC {c:.4} >= averaged {baseline:.4}"),
        )?;
        single.push(c);
    }

    let mut stacker = f64::NEG_INFINITY;
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::defaults(Task::Stage2)
    };
    train_stage2(cfg, train, val, |r, _| {
        stacker = stacker.max(train_score(&r.val));
        Ok(ControlFlow::Continue(()))
    })?;
    ensure(
        stacker >= baseline - 0.01,
        format!("stacker val P_VA {stacker:.4} < averaging {baseline:.4} - 0.01"),
    )?;
    within(
        start.elapsed(),
        Duration::from_secs(300),
        "ensemble benefit",
    )?;
    let best_single = single.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(format!(
        "averaged {baseline:.4} > best fold {best_single:.4}; stacker {stacker:.4}; {:.1?}",
        start.elapsed()
    ))
}

fn fold_vector_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 1..=8 {
        let n = rng.random_range(1..50);
        let folds: Vec<Vec<[f64; 2]>> = (0..k)
            .map(|_| {
                (0..n)
                    .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect()
            })
            .collect();
        let s = build_fold_scores("v", &folds)?;
        // Feature files hold f32, so the file round trip uses f32-exact streams.
        let narrow: Vec<Vec<[f64; 2]>> = folds
            .iter()
            .map(|f| f.iter().map(|p| p.map(|v| v as f32 as f64)).collect())
            .collect();
        let back = FoldScoreSequence::from_record(
            &build_fold_scores("v", &narrow)?.to_record(Labels::None)?,
        )?;
        for i in 0..n {
            let frame = s.frame(i);
            ensure(
                frame.len() == 2 * k,
                format!("K={k}: frame length {}", frame.len()),
            )?;
            for (f, fold) in folds.iter().enumerate() {
                ensure(
                    frame[f].to_bits() == fold[i][0].to_bits()
                        && frame[k + f].to_bits() == fold[i][1].to_bits(),
                    format!("K={k}: frame {i} is not ordered [V1..VK, A1..AK]"),
                )?;
            }
        }
        let bits = |v: &[[f64; 2]]| {
            v.iter()
                .flat_map(|p| p.map(f64::to_bits))
                .collect::<Vec<_>>()
        };
        for f in 0..k {
            ensure(
                bits(&s.fold(f)) == bits(&folds[f]),
                format!("K={k}: fold {f} slice differs"),
            )?;
            ensure(
                bits(&back.fold(f)) == bits(&narrow[f]),
                format!("K={k}: fold {f} differs after file round trip"),
            )?;
        }
    }
    Ok("K = 1..8: length 2K, [V..., A...] order, bit-exact slicing".into())
}

fn au_consistency() -> Outcome {
    let start = Instant::now();
    let mut model = AuModel::<f64>::new(
        AuConfig {
            fusion: AuFusion::T1Only,
            ..AuConfig::new(8)
        },
        3,
    )?;
    model.params_mut().zero_prefix("t2.");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(
        vec![2, 16, 8],
        (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let x = g.constant(x);
    let full = model.predict(&mut g, &p, x)?;
    let abl = model.ablate_t1(&mut g, &p, x)?;
    ensure(
        g.value(full).data() == g.value(abl).data(),
        "T2-zeroed forward differs from T1 ablation",
    )?;

    let data = synth_generate_au(&SynthSpec {
        n_videos: 4,
        ..SynthSpec::default()
    })?;
    let cfg = TrainConfig {
        batch_size: 2,
        stride: 16,
        lr: 0.1,
        eval_train: true,
        ..TrainConfig::defaults(Task::Au)
    };
    let epochs = cfg.epochs;
    let mut best = (f64::NEG_INFINITY, 0);
    train_au(cfg, &data, &[], |r, _| {
        let s = train_score(&r.train);
        if s > best.0 {
            best = (s, r.epoch);
        }
        Ok(ControlFlow::Continue(()))
    })?;
    ensure(
        best.0 >= 0.95,
        format!("best train F1 {:.4} in {epochs} epochs", best.0),
    )?;
    Ok(format!(
        "ablation exact; train F1 {:.4} at epoch {} of {epochs}, {:.1?}",
        best.0,
        best.1,
        start.elapsed()
    ))
}

fn small_stage1() -> TrainConfig {
    TrainConfig {
        gru_hidden: 16,
        gru_layers: 2,
        trf_heads: 2,
        window: 16,
        stride: 16,
        batch_size: 2,
        seed: 17,
        ..TrainConfig::defaults(Task::Stage1)
    }
}

fn param_bits(t: &Trainer<f64>) -> Vec<u64> {
    t.model
        .params()
        .values()
        .iter()
        .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn determinism() -> Outcome {
    let data = synth_generate(&SynthSpec::new(4, 64, 8, 5))?;
    let trace = || -> Result<Vec<u64>, Fail> {
        let mut t = Trainer::<f64>::new(small_stage1(), 8)?;
        let steps = t.train_epoch(&data)?.steps;
        ensure(
            steps.len() >= 5,
            format!("only {} steps per epoch", steps.len()),
        )?;
        Ok(steps[..5].iter().map(|l| l.to_bits()).collect())
    };
    ensure(
        trace()? == trace()?,
        "first five losses differ between identical runs",
    )?;

    let mut straight = Trainer::<f64>::new(small_stage1(), 8)?;
    for _ in 0..4 {
        straight.train_epoch(&data)?;
    }
    let mut first = Trainer::<f64>::new(small_stage1(), 8)?;
    for _ in 0..2 {
        first.train_epoch(&data)?;
    }
    let dir = tempfile::tempdir().map_err(|e| Fail(e.to_string()))?;
    let path = dir.path().join("mid.afck");
    first.checkpoint().save(&path)?;
    drop(first);
    let mut resumed = Trainer::<f64>::from_checkpoint(&CheckpointState::load(&path)?)?;
    for _ in 0..2 {
        resumed.train_epoch(&data)?;
    }
    ensure(
        param_bits(&resumed) == param_bits(&straight),
        "resumed parameters differ from uninterrupted run",
    )?;
    Ok(format!(
        "5-step traces identical; resume after epoch 2 of 4 bit-exact ({} steps)",
        straight.step_count()
    ))
}

fn schedule_endpoints() -> Outcome {
    let (max, min) = (0.01, 1e-5);
    let mut checked = 0;
    for (t0, t_mult) in [(5.0, 1.0), (3.0, 2.0), (1.0, 1.0)] {
        let mut start = 0.0;
        let mut len = t0;
        for _ in 0..4 {
            // A cycle owns its end point, so later cycles start just past it.
            let first = if start == 0.0 { 0.0 } else { 1e-9 };
            for (at, want) in [(first, max), (len / 2.0, (max + min) / 2.0), (len, min)] {
                let got = cosine_warm_restart_lr(start + at, t0, t_mult, max, min);
                ensure(
                    (got - want).abs() <= 1e-12,
                    format!(
                        "T0={t0} Tmult={t_mult} cycle at {start}: lr({at}) = {got}, want {want}"
                    ),
                )?;
                checked += 1;
            }
            start += len;
            len *= t_mult;
        }
    }
    Ok(format!(
        "{checked} endpoint and midpoint checks within 1e-12"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient integrity", gradient_integrity),
        ("CCC oracle equivalence", ccc_oracle),
        ("combined CCC anchor", combined_anchor),
        ("focal loss reduction and macro F1", focal_and_f1),
        ("stage-1 overfit", stage1_overfit),
        ("ensemble benefit", ensemble_benefit),
        ("fold score vector contract", fold_vector_contract),
        ("AU ablation and overfit", au_consistency),
        ("determinism and checkpointing", determinism),
        ("schedule endpoints", schedule_endpoints),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(Fail(format!("panicked: {msg}")))
        });
        match result {
            Ok(detail) => println!("[PASS] criterion {n:>2} {name}: {detail}"),
            Err(Fail(why)) => {
                failed += 1;
                println!("[FAIL] criterion {n:>2} {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
