//! K-fold assignment, per-frame fold score vectors and fold averaging.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Labels, VideoRecord};
use crate::error::{Error, Result};
use crate::models::{predict_record, SequenceModel};
use crate::scalar::Scalar;

pub use crate::models::{Stage2Config, Stage2Model};

/// Whole-video fold assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, video_id: &str) -> Option<usize> {
        self.folds.get(video_id).copied()
    }

    /// Videos in fold `k`, in id order.
    pub fn members(&self, k: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == k)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.folds.values() {
            s[f] += 1;
        }
        s
    }
}

/// Seeded shuffle, then round-robin, so fold sizes differ by at most one.
pub fn kfold_split(videos: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::contract(format!(
            "K-fold split needs K >= 2, got {k}"
        )));
    }
    if videos.len() < k {
        return Err(Error::contract(format!(
            "cannot split {} videos into {k} folds",
            videos.len()
        )));
    }
    let mut ids: Vec<&String> = videos.iter().collect();
    ids.sort();
    ids.dedup();
    if ids.len() != videos.len() {
        return Err(Error::contract("duplicate video ids in fold split"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % k))
        .collect();
    Ok(FoldAssignment { k, folds })
}

/// One video's per-frame vectors `[V¹..V^K, A¹..A^K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldScoreSequence {
    pub video_id: String,
    pub k: usize,
    /// Row-major `n_frames × 2K`.
    pub values: Vec<f64>,
}

/// Interleaves `K` per-fold VA streams of one video into fold score vectors.
pub fn build_fold_scores(video_id: &str, per_fold: &[Vec<[f64; 2]>]) -> Result<FoldScoreSequence> {
    let k = per_fold.len();
    if k == 0 {
        return Err(Error::contract("no fold predictions supplied"));
    }
    let n = per_fold[0].len();
    for (f, stream) in per_fold.iter().enumerate() {
        if stream.len() != n {
            return Err(Error::Alignment {
                video: video_id.to_string(),
                fold: f,
                expected: n,
                actual: stream.len(),
            });
        }
        if let Some(i) = stream
            .iter()
            .position(|p| p.iter().any(|v| !(-1.0..=1.0).contains(v)))
        {
            return Err(Error::contract(format!(
                "video `{video_id}` fold {f} frame {i}: score outside [-1, 1]"
            )));
        }
    }
    let mut values = Vec::with_capacity(n * 2 * k);
    for i in 0..n {
        values.extend(per_fold.iter().map(|s| s[i][0]));
        values.extend(per_fold.iter().map(|s| s[i][1]));
    }
    Ok(FoldScoreSequence {
        video_id: video_id.to_string(),
        k,
        values,
    })
}

impl FoldScoreSequence {
    pub fn n_frames(&self) -> usize {
        self.values.len() / (2 * self.k)
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * 2 * self.k..(i + 1) * 2 * self.k]
    }

    /// Fold `f`'s `(V, A)` stream.
    pub fn fold(&self, f: usize) -> Vec<[f64; 2]> {
        (0..self.n_frames())
            .map(|i| {
                let r = self.frame(i);
                [r[f], r[self.k + f]]
            })
            .collect()
    }

    /// As a stage-2 input record carrying `labels`.
    pub fn to_record(&self, labels: Labels) -> Result<VideoRecord> {
        VideoRecord::new(
            self.video_id.clone(),
            2 * self.k,
            self.values.iter().map(|&v| v as f32).collect(),
            labels,
        )
    }

    pub fn from_record(rec: &VideoRecord) -> Result<Self> {
        if !rec.feat_dim.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "video `{}`: {}-dim features are not fold score vectors",
                rec.video_id, rec.feat_dim
            )));
        }
        Ok(Self {
            video_id: rec.video_id.clone(),
            k: rec.feat_dim / 2,
            values: rec.features.iter().map(|&v| v as f64).collect(),
        })
    }
}

/// Runs every fold model over one video and interleaves their VA streams.
pub fn infer_fold_scores<S: Scalar, M: SequenceModel<S>>(
    models: &[M],
    record: &VideoRecord,
    window: usize,
    batch: usize,
) -> Result<FoldScoreSequence> {
    let mut per_fold = Vec::with_capacity(models.len());
    for (k, m) in models.iter().enumerate() {
        if m.d_out() != 2 {
            return Err(Error::config(format!(
                "fold {k} model does not predict valence/arousal"
            )));
        }
        let flat = predict_record(m, record, window, batch)?;
        per_fold.push(flat.chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>());
    }
    build_fold_scores(&record.video_id, &per_fold)
}

/// Per-frame mean over folds of valence and of arousal.
pub fn average_folds(f: &FoldScoreSequence) -> Vec<[f64; 2]> {
    let k = f.k as f64;
    (0..f.n_frames())
        .map(|i| {
            let r = f.frame(i);
            let (v, a) = r.split_at(f.k);
            [v.iter().sum::<f64>() / k, a.iter().sum::<f64>() / k]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CccResult;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:02}")).collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let a = kfold_split(&ids(5), 5, 1).unwrap();
        assert_eq!(a.sizes(), vec![1; 5]);
        let b = kfold_split(&ids(23), 5, 9).unwrap();
        let mut s = b.sizes();
        s.sort();
        assert_eq!(s, vec![4, 4, 5, 5, 5]);
        assert_eq!(b, kfold_split(&ids(23), 5, 9).unwrap());
        assert!(kfold_split(&ids(3), 5, 0).is_err());
        assert!(kfold_split(&ids(3), 1, 0).is_err());
    }

    #[test]
    fn ordering_law() {
        let f = build_fold_scores("v", &[vec![[0.1, 0.2]], vec![[0.3, 0.4]]]).unwrap();
        assert_eq!(f.values, vec![0.1, 0.3, 0.2, 0.4]);
        let five = build_fold_scores("v", &vec![vec![[0.0, 0.0]; 3]; 5]).unwrap();
        assert_eq!(five.frame(0).len(), 10);
    }

    #[test]
    fn mismatch_names_video_and_fold() {
        let err = build_fold_scores(
            "clip",
            &[
                vec![[0.0, 0.0]; 4],
                vec![[0.0, 0.0]; 4],
                vec![[0.0, 0.0]; 3],
            ],
        )
        .unwrap_err();
        match err {
            Error::Alignment {
                video,
                fold,
                expected,
                actual,
            } => {
                assert_eq!((video.as_str(), fold, expected, actual), ("clip", 2, 4, 3));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn averaging_cases() {
        let f = build_fold_scores("v", &[vec![[0.2, -0.1]], vec![[0.4, 0.3]]]).unwrap();
        let avg = average_folds(&f)[0];
        assert!((avg[0] - 0.3).abs() < 1e-15 && (avg[1] - 0.1).abs() < 1e-15);
        let same = build_fold_scores("v", &vec![vec![[0.25, -0.5], [0.5, 0.75]]; 3]).unwrap();
        assert_eq!(average_folds(&same), vec![[0.25, -0.5], [0.5, 0.75]]);
    }

    #[test]
    fn averaging_noisy_folds_beats_each_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let n = 2000;
        let target: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let t = i as f64 / 50.0;
                [0.6 * t.sin(), 0.5 * (0.7 * t).cos()]
            })
            .collect();
        let folds: Vec<Vec<[f64; 2]>> = (0..5)
            .map(|_| {
                target
                    .iter()
                    .map(|y| {
                        [
                            (y[0] + noise.sample(&mut rng)).clamp(-1.0, 1.0),
                            (y[1] + noise.sample(&mut rng)).clamp(-1.0, 1.0),
                        ]
                    })
                    .collect()
            })
            .collect();
        let f = build_fold_scores("v", &folds).unwrap();
        let avg = CccResult::from_frames(&average_folds(&f), &target)
            .unwrap()
            .combined;
        for fold in &folds {
            assert!(avg > CccResult::from_frames(fold, &target).unwrap().combined);
        }
    }

    #[test]
    fn fold_inference_interleaves_model_outputs() {
        use crate::data::{synth_generate, SynthSpec};
        use crate::models::{Stage1Config, Stage1Model};
        let rec = synth_generate(&SynthSpec::new(1, 30, 4, 2))
            .unwrap()
            .remove(0);
        let cfg = Stage1Config {
            d_in: 4,
            gru_hidden: 3,
            gru_layers: 1,
            blocks: 1,
            heads: 2,
            ff_mult: 2,
        };
        let models: Vec<Stage1Model<f64>> =
            (0..3).map(|s| Stage1Model::new(cfg, s).unwrap()).collect();
        let f = infer_fold_scores(&models, &rec, 8, 4).unwrap();
        assert_eq!((f.k, f.n_frames()), (3, 30));
        for (k, m) in models.iter().enumerate() {
            let direct = predict_record(m, &rec, 8, 4).unwrap();
            let stream: Vec<f64> = f.fold(k).into_iter().flatten().collect();
            assert_eq!(stream, direct);
        }
    }

    proptest! {
        #[test]
        fn slicing_round_trips_and_averaging_is_permutation_invariant(
            k in 2usize..7,
            n in 1usize..20,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let folds: Vec<Vec<[f64; 2]>> = (0..k)
                .map(|_| (0..n).map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]).collect())
                .collect();
            let f = build_fold_scores("v", &folds).unwrap();
            prop_assert_eq!(f.frame(0).len(), 2 * k);
            for (i, fold) in folds.iter().enumerate() {
                prop_assert_eq!(&f.fold(i), fold);
            }
            let mut rev = folds.clone();
            rev.reverse();
            let r = build_fold_scores("v", &rev).unwrap();
            for (a, b) in average_folds(&f).iter().zip(average_folds(&r)) {
                prop_assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
            }
        }
    }
}
