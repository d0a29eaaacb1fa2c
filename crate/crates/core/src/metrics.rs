//! Concordance correlation, the combined valence/arousal score and F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Population moments of a prediction/label pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentSummary<S> {
    pub mean_label: S,
    pub mean_pred: S,
    pub std_label: S,
    pub std_pred: S,
    /// Pearson correlation; zero when either side is constant.
    pub pearson: S,
    pub cov: S,
}

fn check_pair<S>(pred: &[S], label: &[S]) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::contract(format!(
            "prediction/label length mismatch: {} vs {}",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::contract(format!(
            "concordance needs at least 2 samples, got {}",
            pred.len()
        )));
    }
    Ok(())
}

/// Divide-by-N moments of `pred` and `label`.
pub fn moments<S: Scalar>(pred: &[S], label: &[S]) -> Result<MomentSummary<S>> {
    check_pair(pred, label)?;
    let n = S::of(pred.len() as f64);
    let mean_pred = pred.iter().copied().sum::<S>() / n;
    let mean_label = label.iter().copied().sum::<S>() / n;
    let (mut vp, mut vl, mut cov) = (S::zero(), S::zero(), S::zero());
    for (&p, &l) in pred.iter().zip(label) {
        let (dp, dl) = (p - mean_pred, l - mean_label);
        vp += dp * dp;
        vl += dl * dl;
        cov += dp * dl;
    }
    let (vp, vl, cov) = (vp / n, vl / n, cov / n);
    let (std_pred, std_label) = (vp.sqrt(), vl.sqrt());
    let pearson = if std_pred > S::zero() && std_label > S::zero() {
        cov / (std_pred * std_label)
    } else {
        S::zero()
    };
    Ok(MomentSummary {
        mean_label,
        mean_pred,
        std_label,
        std_pred,
        pearson,
        cov,
    })
}

/// Concordance correlation coefficient
/// `2 cov / (σ_pred² + σ_label² + (μ_pred - μ_label)²)`, zero when the
/// denominator vanishes.
pub fn ccc<S: Scalar>(pred: &[S], label: &[S]) -> Result<S> {
    let m = moments(pred, label)?;
    let diff = m.mean_pred - m.mean_label;
    let denom = m.std_pred * m.std_pred + m.std_label * m.std_label + diff * diff;
    if denom == S::zero() {
        return Ok(S::zero());
    }
    Ok((S::of(2.0) * m.cov / denom).max(-S::one()).min(S::one()))
}

/// Mean of the valence and arousal scores.
pub fn va_combined<S: Scalar>(ccc_v: S, ccc_a: S) -> S {
    (ccc_v + ccc_a) / S::of(2.0)
}

/// Valence, arousal and combined concordance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CccResult {
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub combined: f64,
}

impl CccResult {
    pub fn new(ccc_v: f64, ccc_a: f64) -> Self {
        Self {
            ccc_v,
            ccc_a,
            combined: va_combined(ccc_v, ccc_a),
        }
    }

    /// Scores per-frame `[valence, arousal]` predictions.
    pub fn from_frames<S: Scalar>(pred: &[[S; 2]], label: &[[S; 2]]) -> Result<Self> {
        let col = |x: &[[S; 2]], c: usize| x.iter().map(|r| r[c]).collect::<Vec<S>>();
        let v = ccc(&col(pred, 0), &col(label, 0))?;
        let a = ccc(&col(pred, 1), &col(label, 1))?;
        Ok(Self::new(v.as_f64(), a.as_f64()))
    }
}

/// Averaging mode for multi-label F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    #[default]
    Macro,
    Micro,
}

impl std::str::FromStr for F1Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            other => Err(Error::config(format!(
                "unknown F1 averaging `{other}` (valid: macro, micro)"
            ))),
        }
    }
}

impl std::fmt::Display for F1Average {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Macro => "macro",
            Self::Micro => "micro",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Per-class confusion counts over row-major `[N, n_classes]` bit arrays.
pub fn confusion(pred: &[u8], target: &[u8], n_classes: usize) -> Result<Vec<Confusion>> {
    if pred.len() != target.len() || n_classes == 0 || !pred.len().is_multiple_of(n_classes) {
        return Err(Error::contract(format!(
            "F1 inputs must be equal-shaped [N, {n_classes}] arrays, got {} and {} bits",
            pred.len(),
            target.len()
        )));
    }
    let mut counts = vec![Confusion::default(); n_classes];
    for (prow, trow) in pred.chunks(n_classes).zip(target.chunks(n_classes)) {
        for ((c, &p), &t) in counts.iter_mut().zip(prow).zip(trow) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

pub fn per_class_f1(pred: &[u8], target: &[u8], n_classes: usize) -> Result<Vec<f64>> {
    Ok(confusion(pred, target, n_classes)?
        .iter()
        .map(Confusion::f1)
        .collect())
}

/// Macro (mean of per-class F1) or micro (pooled counts) F1.
pub fn f1_score(pred: &[u8], target: &[u8], n_classes: usize, average: F1Average) -> Result<f64> {
    let counts = confusion(pred, target, n_classes)?;
    Ok(match average {
        F1Average::Macro => counts.iter().map(Confusion::f1).sum::<f64>() / n_classes as f64,
        F1Average::Micro => {
            let pooled = counts
                .iter()
                .fold(Confusion::default(), |acc, c| Confusion {
                    tp: acc.tp + c.tp,
                    fp: acc.fp + c.fp,
                    fn_: acc.fn_ + c.fn_,
                });
            pooled.f1()
        }
    })
}

pub fn f1_macro(pred: &[u8], target: &[u8], n_classes: usize) -> Result<f64> {
    f1_score(pred, target, n_classes, F1Average::Macro)
}
