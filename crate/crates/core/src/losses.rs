//! Differentiable training objectives built on the tape.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Added to the CCC denominator when the labels are constant.
pub const CCC_DENOM_GUARD: f64 = 1e-8;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before
/// the focal log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Concordance of a 1-D prediction `pred[N]` with constant labels, on the
/// tape.
pub fn ccc_on_graph<S: Scalar>(g: &mut Graph<S>, pred: Var, label: &[S]) -> Result<Var> {
    let n = g.value(pred).numel();
    if n != label.len() || g.shape(pred).len() != 1 {
        return Err(Error::contract(format!(
            "ccc_loss prediction shape {:?} does not match {} labels",
            g.shape(pred),
            label.len()
        )));
    }
    if n < 2 {
        return Err(Error::contract("ccc_loss needs at least 2 frames"));
    }
    let nf = S::of(n as f64);
    let mean_label = label.iter().copied().sum::<S>() / nf;
    let centered: Vec<S> = label.iter().map(|&l| l - mean_label).collect();
    let mut var_label = centered.iter().map(|&d| d * d).sum::<S>() / nf;
    if var_label == S::zero() {
        log::warn!("constant labels in CCC loss batch; adding denominator guard {CCC_DENOM_GUARD}");
        var_label += S::of(CCC_DENOM_GUARD);
    }

    let mean_pred = g.mean(pred)?;
    let dp = g.sub(pred, mean_pred)?;
    let sq = g.mul(dp, dp)?;
    let var_pred = g.mean(sq)?;
    let dl = g.constant(Tensor::from_parts(vec![n], centered));
    let cross = g.mul(dp, dl)?;
    let cov = g.mean(cross)?;
    let shift = g.affine(mean_pred, S::one(), -mean_label)?;
    let shift_sq = g.mul(shift, shift)?;
    let denom = g.add(var_pred, shift_sq)?;
    let denom = g.affine(denom, S::one(), var_label)?;
    let num = g.scale(cov, S::of(2.0))?;
    g.div(num, denom)
}

/// `1 - (ccc_v + ccc_a) / 2`.
pub fn ccc_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred_v: Var,
    pred_a: Var,
    label_v: &[S],
    label_a: &[S],
) -> Result<Var> {
    let cv = ccc_on_graph(g, pred_v, label_v)?;
    let ca = ccc_on_graph(g, pred_a, label_a)?;
    let sum = g.add(cv, ca)?;
    g.affine(sum, S::of(-0.5), S::one())
}

/// Frames of a `[..., 2]` prediction that enter the loss, with their
/// `[valence, arousal]` labels.
#[derive(Clone, Debug)]
pub struct VaTargets<S> {
    frames: Rc<[usize]>,
    valence: Vec<S>,
    arousal: Vec<S>,
}

impl<S: Scalar> VaTargets<S> {
    /// `frames` are flat frame indices into the `[B*T]` frame grid; labels
    /// are given in the same order.
    pub fn new(frames: Vec<usize>, labels: &[[S; 2]]) -> Result<Self> {
        if frames.len() != labels.len() {
            return Err(Error::contract("frame index and label counts differ"));
        }
        Ok(Self {
            frames: frames.into(),
            valence: labels.iter().map(|l| l[0]).collect(),
            arousal: labels.iter().map(|l| l[1]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// CCC loss of a `[B, T, 2]` prediction restricted to these frames.
    pub fn loss(&self, g: &mut Graph<S>, pred: Var) -> Result<Var> {
        let v_idx: Rc<[usize]> = self.frames.iter().map(|&f| 2 * f).collect();
        let a_idx: Rc<[usize]> = self.frames.iter().map(|&f| 2 * f + 1).collect();
        let pv = g.gather(pred, v_idx)?;
        let pa = g.gather(pred, a_idx)?;
        ccc_loss(g, pv, pa, &self.valence, &self.arousal)
    }
}

/// Weights of the fused, GRU and Transformer heads in the stage-1 loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub fused: f64,
    pub gru: f64,
    pub transformer: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self {
            fused: 1.0,
            gru: 1.0,
            transformer: 1.0,
        }
    }
}

/// Loss hyperparameters shared by the training tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub heads: HeadWeights,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            heads: HeadWeights::default(),
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

/// `λ_f·L(fused) + λ_g·L(gru) + λ_t·L(transformer)` with `L` the CCC loss.
/// Heads with zero weight are skipped entirely.
pub fn stage1_combined_loss<S: Scalar>(
    g: &mut Graph<S>,
    fused: Var,
    gru_head: Var,
    trf_head: Var,
    targets: &VaTargets<S>,
    weights: HeadWeights,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (head, w) in [
        (fused, weights.fused),
        (gru_head, weights.gru),
        (trf_head, weights.transformer),
    ] {
        if w == 0.0 {
            continue;
        }
        let l = targets.loss(g, head)?;
        let l = g.scale(l, S::of(w))?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(S::zero()))),
    }
}

/// Focal loss `-α (1 - p_t)^γ log p_t`, averaged over every element of
/// `prob`. `p_t = p` where the target is 1 and `1 - p` where it is 0.
pub fn focal_loss<S: Scalar>(
    g: &mut Graph<S>,
    prob: Var,
    target: &[u8],
    gamma: S,
    alpha: S,
) -> Result<Var> {
    let shape = g.shape(prob).to_vec();
    if g.value(prob).numel() != target.len() {
        return Err(Error::contract(format!(
            "focal_loss: {} targets for probabilities of shape {shape:?}",
            target.len()
        )));
    }
    if let Some(bad) = target.iter().find(|&&t| t > 1) {
        return Err(Error::contract(format!(
            "focal_loss target {bad} is not in {{0, 1}}"
        )));
    }
    let sign: Vec<S> = target
        .iter()
        .map(|&t| if t == 1 { S::one() } else { -S::one() })
        .collect();
    let offset: Vec<S> = target
        .iter()
        .map(|&t| if t == 1 { S::zero() } else { S::one() })
        .collect();
    let lo = S::of(PROB_CLAMP);
    let p = g.clamp(prob, lo, S::one() - lo)?;
    let sign = g.constant(Tensor::from_parts(shape.clone(), sign));
    let offset = g.constant(Tensor::from_parts(shape, offset));
    let pt = g.mul(p, sign)?;
    let pt = g.add(pt, offset)?;
    let log_pt = g.log(pt)?;
    let per = if gamma == S::zero() {
        log_pt
    } else {
        let q = g.affine(pt, -S::one(), S::one())?;
        let w = g.powf(q, gamma)?;
        g.mul(w, log_pt)?
    };
    let m = g.mean(per)?;
    g.scale(m, -alpha)
}
