use std::ops::ControlFlow;

use affect_core::data::{
    synth_generate, synth_generate_au, Labels, SequenceBatch, Span, SynthSpec, VideoRecord,
    WindowRef,
};
use affect_core::metrics::CccResult;
use affect_core::models::{batch_input, Model, SequenceModel};
use affect_core::training::{
    fit, train_stage1, train_stage2, CheckpointState, Score, Task, TrainConfig, Trainer,
};
use affect_core::{Error, Graph};

fn stage1_config() -> TrainConfig {
    TrainConfig {
        gru_hidden: 8,
        gru_layers: 1,
        trf_heads: 2,
        ff_mult: 2,
        window: 16,
        stride: 16,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::defaults(Task::Stage1)
    }
}

fn au_config() -> TrainConfig {
    TrainConfig {
        trf_heads: 2,
        ff_mult: 2,
        au_t1_blocks: 1,
        au_t2_blocks: 1,
        window: 16,
        stride: 16,
        batch_size: 4,
        t0: 2.0,
        seed: 5,
        ..TrainConfig::defaults(Task::Au)
    }
}

fn va_videos() -> Vec<VideoRecord> {
    synth_generate(&SynthSpec::new(4, 48, 8, 3)).unwrap()
}

fn au_videos() -> Vec<VideoRecord> {
    synth_generate_au(&SynthSpec::new(3, 40, 8, 4)).unwrap()
}

fn param_bits(t: &Trainer<f64>) -> Vec<u64> {
    t.model
        .params()
        .values()
        .iter()
        .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn same_seed_same_loss_trace() {
    let data = va_videos();
    let trace = || {
        let mut t = Trainer::<f64>::new(
            TrainConfig {
                batch_size: 2,
                ..stage1_config()
            },
            8,
        )
        .unwrap();
        t.train_epoch(&data).unwrap().steps
    };
    let (a, b) = (trace(), trace());
    assert!(a.len() >= 5);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert!(a.iter().all(|l| l.is_finite()));

    let mut other = Trainer::<f64>::new(
        TrainConfig {
            seed: 12,
            batch_size: 2,
            ..stage1_config()
        },
        8,
    )
    .unwrap();
    assert_ne!(bits(&other.train_epoch(&data).unwrap().steps), bits(&a));
}

fn resume_matches_uninterrupted(cfg: TrainConfig, data: &[VideoRecord]) {
    let d = data[0].feat_dim;
    let mut straight = Trainer::<f64>::new(cfg.clone(), d).unwrap();
    for _ in 0..4 {
        straight.train_epoch(data).unwrap();
    }

    let mut first = Trainer::<f64>::new(cfg, d).unwrap();
    for _ in 0..2 {
        first.train_epoch(data).unwrap();
    }
    let bytes = first.checkpoint().encode().unwrap();
    drop(first);
    let ck = CheckpointState::decode(&bytes, "mid").unwrap();
    let mut resumed = Trainer::<f64>::from_checkpoint(&ck).unwrap();
    assert_eq!(resumed.epoch(), 2);
    for _ in 0..2 {
        resumed.train_epoch(data).unwrap();
    }
    assert_eq!(resumed.step_count(), straight.step_count());
    assert_eq!(param_bits(&resumed), param_bits(&straight));
    assert_eq!(
        resumed.checkpoint().encode().unwrap(),
        straight.checkpoint().encode().unwrap()
    );
}

#[test]
fn checkpoint_resume_is_bit_exact_adam() {
    resume_matches_uninterrupted(stage1_config(), &va_videos());
}

#[test]
fn checkpoint_resume_is_bit_exact_sgd_cosine() {
    resume_matches_uninterrupted(au_config(), &au_videos());
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    for (cfg, data) in [(stage1_config(), va_videos()), (au_config(), au_videos())] {
        let mut t = Trainer::<f64>::new(cfg, 8).unwrap();
        t.config.lr = 0.0;
        t.config.eta_min = 0.0;
        let before = param_bits(&t);
        t.train_epoch(&data).unwrap();
        assert_eq!(param_bits(&t), before);
    }
}

#[test]
fn stage1_loss_decreases_over_first_epochs() {
    let data = synth_generate(&SynthSpec::new(6, 96, 8, 21)).unwrap();
    let mut t = Trainer::<f64>::new(
        TrainConfig {
            gru_hidden: 16,
            ..stage1_config()
        },
        8,
    )
    .unwrap();
    let losses: Vec<f64> = (0..4).map(|_| t.train_epoch(&data).unwrap().mean).collect();
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 1, "{losses:?}");
    assert!(losses[3] < losses[0], "{losses:?}");
}

/// Binary cross-entropy with the same probability clamp the loss uses.
fn bce(logits: &[f64], bits: &[u8]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(bits)
        .map(|(&z, &y)| {
            let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-7, 1.0 - 1e-7);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / logits.len() as f64
}

#[test]
fn focal_without_focusing_logs_plain_cross_entropy() {
    let video = au_videos().remove(0);
    let cfg = TrainConfig {
        focal_gamma: 0.0,
        focal_alpha: 1.0,
        window: 40,
        stride: 40,
        ..au_config()
    };
    let mut t = Trainer::<f64>::new(cfg, 8).unwrap();
    let Model::Au(au) = t.model.clone() else {
        panic!()
    };

    let batch = SequenceBatch::collate(
        std::slice::from_ref(&video),
        &[WindowRef {
            video: 0,
            span: Span {
                start: 0,
                len: 40,
                valid: 40,
            },
        }],
    )
    .unwrap();
    let (_, bits) = batch.au_targets().unwrap();
    let mut g = Graph::new();
    let p = au.params.bind_frozen(&mut g);
    let x = batch_input(&mut g, &batch);
    let out = au.forward(&mut g, &p, x).unwrap();
    let want = [out.t1, out.t2, out.fused_repr, out.logits]
        .iter()
        .map(|&h| bce(g.value(h).data(), &bits))
        .sum::<f64>()
        / 4.0;

    let logged = t.train_epoch(std::slice::from_ref(&video)).unwrap().steps[0];
    assert!((logged - want).abs() < 1e-9, "{logged} vs {want}");
}

#[test]
fn fit_keeps_best_validation_state() {
    let data = va_videos();
    let (train, val) = data.split_at(3);
    let cfg = TrainConfig {
        epochs: 3,
        eval_train: true,
        ..stage1_config()
    };
    let mut seen = Vec::new();
    let out = train_stage1(cfg, train, val, |r, _| {
        seen.push(r.clone());
        Ok(ControlFlow::Continue(()))
    })
    .unwrap();
    assert_eq!(out.history, seen);
    assert_eq!(out.history.len(), 3);
    let scores: Vec<f64> = out
        .history
        .iter()
        .map(|r| r.val.unwrap().headline())
        .collect();
    let best_epoch = out.history.last().unwrap().best_epoch.unwrap();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(scores[best_epoch - 1], best);
    let ck = out.best.unwrap();
    assert_eq!(ck.epoch, best_epoch);
    let reloaded = Trainer::<f64>::from_checkpoint(&ck).unwrap();
    assert_eq!(reloaded.evaluate(val).unwrap().pooled.headline(), best);
    assert!(matches!(out.history[0].train, Some(Score::Va(_))));
    let line = serde_json::to_string(&out.history[0]).unwrap();
    assert!(
        line.contains("\"combined\"") && line.contains("\"train_loss\""),
        "{line}"
    );
}

#[test]
fn fit_can_stop_early() {
    let data = va_videos();
    let mut t = Trainer::<f64>::new(
        TrainConfig {
            epochs: 10,
            ..stage1_config()
        },
        8,
    )
    .unwrap();
    let out = fit(&mut t, &data, &[], |r, _| {
        Ok(if r.epoch == 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        })
    })
    .unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best.unwrap().epoch, 2);
}

#[test]
fn bad_inputs_are_config_errors() {
    let data = va_videos();
    let cont = |_: &_, _: &_| Ok(ControlFlow::Continue(()));
    assert!(matches!(
        train_stage1(stage1_config(), &[], &[], cont),
        Err(Error::Config(_))
    ));
    let unlabeled = VideoRecord::new("u", 8, vec![0.0; 80], Labels::None).unwrap();
    assert!(matches!(
        train_stage1(stage1_config(), &[unlabeled], &[], cont),
        Err(Error::Config(_))
    ));
    let au = au_videos();
    assert!(matches!(
        train_stage1(stage1_config(), &au, &[], cont),
        Err(Error::Config(_))
    ));
    let odd = synth_generate(&SynthSpec::new(1, 20, 7, 0)).unwrap();
    let e = train_stage2(TrainConfig::defaults(Task::Stage2), &odd, &[], cont).unwrap_err();
    assert!(e.to_string().contains("2K"), "{e}");
    assert!(matches!(
        train_stage2(stage1_config(), &data, &[], cont),
        Err(Error::Config(_))
    ));
}

#[test]
fn perfect_predictions_score_one_and_pooling_differs_from_per_video() {
    let y: Vec<[f64; 2]> = (0..30)
        .map(|i| [(i as f64 / 7.0).sin(), (i as f64 / 5.0).cos()])
        .collect();
    assert_eq!(CccResult::from_frames(&y, &y).unwrap().combined, 1.0);

    // Each video is predicted perfectly up to a per-video offset: each per-video
    // CCC is below 1 by the same amount, but pooling mixes the offsets.
    let a: Vec<[f64; 2]> = (0..20)
        .map(|i| [0.1 * (i % 5) as f64, 0.05 * (i % 3) as f64])
        .collect();
    let b: Vec<[f64; 2]> = a.iter().map(|r| [r[0] - 0.5, r[1] + 0.4]).collect();
    let pa: Vec<[f64; 2]> = a.iter().map(|r| [r[0] + 0.1, r[1]]).collect();
    let pb: Vec<[f64; 2]> = b.iter().map(|r| [r[0] - 0.1, r[1]]).collect();
    let per = (CccResult::from_frames(&pa, &a).unwrap().combined
        + CccResult::from_frames(&pb, &b).unwrap().combined)
        / 2.0;
    let pooled = CccResult::from_frames(&[pa, pb].concat(), &[a, b].concat())
        .unwrap()
        .combined;
    assert!((per - pooled).abs() > 1e-3, "{per} vs {pooled}");
}
