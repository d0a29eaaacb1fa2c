use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelSpec, SequenceModel};
use crate::data::{SequenceBatch, AU_COUNT};
use crate::error::{Error, Result};
use crate::layers::{
    add_positional_encoding, Bound, Linear, ParamSet, TransformerBlock, TransformerConfig,
};
use crate::losses::{focal_loss, LossSettings};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Which head logits make up the final output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AuFusion {
    /// Mean of the T1, T2 and fused-representation heads.
    #[default]
    All,
    /// The T1 head alone.
    T1Only,
}

impl FromStr for AuFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "t1" => Ok(Self::T1Only),
            other => Err(Error::config(format!(
                "unknown AU fusion `{other}` (valid: all, t1)"
            ))),
        }
    }
}

impl fmt::Display for AuFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::T1Only => "t1",
        })
    }
}

/// Two Transformer branches over the same features. T2 works in an
/// expanded width `d_expand` and is projected back to `d_in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuConfig {
    pub d_in: usize,
    pub d_expand: usize,
    pub t1_blocks: usize,
    pub t2_blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub fusion: AuFusion,
}

impl AuConfig {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            d_expand: 2 * d_in,
            t1_blocks: 2,
            t2_blocks: 2,
            heads: 4,
            ff_mult: 4,
            fusion: AuFusion::All,
        }
    }

    fn block(&self, d: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: d,
            heads: self.heads,
            d_ff: self.ff_mult * d,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AuModel<S> {
    pub cfg: AuConfig,
    pub params: ParamSet<S>,
    pub t1: Vec<TransformerBlock>,
    pub expand: Linear,
    pub t2: Vec<TransformerBlock>,
    pub compress: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc_f: Linear,
}

/// Per-head and final `[B, T, 12]` logits.
#[derive(Clone, Copy, Debug)]
pub struct AuOutput {
    pub t1: Var,
    pub t2: Var,
    pub fused_repr: Var,
    pub logits: Var,
}

impl<S: Scalar> AuModel<S> {
    pub fn new(cfg: AuConfig, seed: u64) -> Result<Self> {
        if cfg.d_expand <= cfg.d_in {
            return Err(Error::config(format!(
                "AU expansion width {} must exceed the input width {}",
                cfg.d_expand, cfg.d_in
            )));
        }
        if cfg.t1_blocks == 0 || cfg.t2_blocks == 0 {
            return Err(Error::config("both AU branches need at least one block"));
        }
        cfg.block(cfg.d_in).validate()?;
        cfg.block(cfg.d_expand).validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let t1 = (0..cfg.t1_blocks)
            .map(|i| {
                TransformerBlock::new(
                    &mut params,
                    &mut rng,
                    &format!("t1.b{i}"),
                    cfg.block(cfg.d_in),
                )
            })
            .collect::<Result<_>>()?;
        let expand = Linear::new(&mut params, &mut rng, "t2.expand", cfg.d_in, cfg.d_expand)?;
        let t2 = (0..cfg.t2_blocks)
            .map(|i| {
                TransformerBlock::new(
                    &mut params,
                    &mut rng,
                    &format!("t2.b{i}"),
                    cfg.block(cfg.d_expand),
                )
            })
            .collect::<Result<_>>()?;
        let compress = Linear::new(&mut params, &mut rng, "t2.compress", cfg.d_expand, cfg.d_in)?;
        let fc1 = Linear::new(&mut params, &mut rng, "fc1", cfg.d_in, AU_COUNT)?;
        let fc2 = Linear::new(&mut params, &mut rng, "fc2", cfg.d_in, AU_COUNT)?;
        let fc_f = Linear::new(&mut params, &mut rng, "fc_f", 2 * cfg.d_in, AU_COUNT)?;
        Ok(Self {
            cfg,
            params,
            t1,
            expand,
            t2,
            compress,
            fc1,
            fc2,
            fc_f,
        })
    }

    fn branch_t1(&self, g: &mut Graph<S>, p: &Bound, xp: Var) -> Result<Var> {
        let mut h = xp;
        for b in &self.t1 {
            h = b.forward(g, p, h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<AuOutput> {
        let xp = add_positional_encoding(g, x)?;
        let h1 = self.branch_t1(g, p, xp)?;
        let mut h2 = self.expand.forward(g, p, xp)?;
        for b in &self.t2 {
            h2 = b.forward(g, p, h2)?;
        }
        let h2 = self.compress.forward(g, p, h2)?;
        let cat = g.concat(&[h1, h2])?;
        let t1 = self.fc1.forward(g, p, h1)?;
        let t2 = self.fc2.forward(g, p, h2)?;
        let fused_repr = self.fc_f.forward(g, p, cat)?;
        let logits = match self.cfg.fusion {
            AuFusion::T1Only => t1,
            AuFusion::All => {
                let s = g.add(t1, t2)?;
                let s = g.add(s, fused_repr)?;
                g.scale(s, S::one() / S::of(3.0))?
            }
        };
        Ok(AuOutput {
            t1,
            t2,
            fused_repr,
            logits,
        })
    }

    /// Probabilities from the T1 branch and its head alone.
    pub fn ablate_t1(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let xp = add_positional_encoding(g, x)?;
        let h1 = self.branch_t1(g, p, xp)?;
        let l = self.fc1.forward(g, p, h1)?;
        g.sigmoid(l)
    }
}

impl<S: Scalar> SequenceModel<S> for AuModel<S> {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Au(self.cfg)
    }

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn d_out(&self) -> usize {
        AU_COUNT
    }

    fn predict(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let out = self.forward(g, p, x)?;
        g.sigmoid(out.logits)
    }

    /// Equal-weight mean of the focal losses of the three heads and the
    /// final output, over real frames.
    fn loss(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        batch: &SequenceBatch,
        settings: &LossSettings,
    ) -> Result<Var> {
        let out = self.forward(g, p, x)?;
        let (idx, bits) = batch.au_targets()?;
        let idx: Rc<[usize]> = idx.into();
        let heads = match self.cfg.fusion {
            AuFusion::All => vec![out.t1, out.t2, out.fused_repr, out.logits],
            AuFusion::T1Only => vec![out.t1],
        };
        let n = heads.len();
        let mut total: Option<Var> = None;
        for h in heads {
            let prob = g.sigmoid(h)?;
            let prob = g.gather(prob, idx.clone())?;
            let l = focal_loss(
                g,
                prob,
                &bits,
                S::of(settings.focal_gamma),
                S::of(settings.focal_alpha),
            )?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        g.scale(
            total.expect("at least one head"),
            S::one() / S::of(n as f64),
        )
    }
}

/// Thresholds probabilities: bit is 1 when `prob >= threshold`.
pub fn au_predict<S: Scalar>(probs: &[S], threshold: S) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}
