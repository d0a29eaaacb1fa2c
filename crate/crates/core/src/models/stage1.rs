use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelSpec, SequenceModel};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::layers::{
    add_positional_encoding, Bound, Gru, Linear, ParamSet, TransformerBlock, TransformerConfig,
};
use crate::losses::{stage1_combined_loss, LossSettings};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// GRU branch ‖ Transformer branch, each with its own VA head, plus a
/// fused head over the concatenated branch outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage1Config {
    pub d_in: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl Stage1Config {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            gru_hidden: 256,
            gru_layers: 2,
            blocks: 1,
            heads: 4,
            ff_mult: 4,
        }
    }

    fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_in,
            heads: self.heads,
            d_ff: self.ff_mult * self.d_in,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Model<S> {
    pub cfg: Stage1Config,
    pub params: ParamSet<S>,
    pub gru: Gru,
    pub blocks: Vec<TransformerBlock>,
    pub head_gru: Linear,
    pub head_trf: Linear,
    pub head_fused: Linear,
}

/// The three `[B, T, 2]` head outputs.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Output {
    pub fused: Var,
    pub gru: Var,
    pub transformer: Var,
}

impl<S: Scalar> Stage1Model<S> {
    pub fn new(cfg: Stage1Config, seed: u64) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::config(
                "stage-1 needs at least one transformer block",
            ));
        }
        cfg.transformer().validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let gru = Gru::new(
            &mut params,
            &mut rng,
            "gru",
            cfg.d_in,
            cfg.gru_hidden,
            cfg.gru_layers,
        )?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                TransformerBlock::new(
                    &mut params,
                    &mut rng,
                    &format!("trf.b{i}"),
                    cfg.transformer(),
                )
            })
            .collect::<Result<_>>()?;
        let head_gru = Linear::new(&mut params, &mut rng, "head_gru", cfg.gru_hidden, 2)?;
        let head_trf = Linear::new(&mut params, &mut rng, "head_trf", cfg.d_in, 2)?;
        let head_fused = Linear::new(
            &mut params,
            &mut rng,
            "head_fused",
            cfg.gru_hidden + cfg.d_in,
            2,
        )?;
        Ok(Self {
            cfg,
            params,
            gru,
            blocks,
            head_gru,
            head_trf,
            head_fused,
        })
    }

    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Stage1Output> {
        let (hg, _) = self.gru.forward(g, p, x, None)?;
        let mut ht = add_positional_encoding(g, x)?;
        for b in &self.blocks {
            ht = b.forward(g, p, ht)?;
        }
        let cat = g.concat(&[hg, ht])?;
        Ok(Stage1Output {
            fused: self.head_fused.forward_tanh(g, p, cat)?,
            gru: self.head_gru.forward_tanh(g, p, hg)?,
            transformer: self.head_trf.forward_tanh(g, p, ht)?,
        })
    }
}

impl<S: Scalar> SequenceModel<S> for Stage1Model<S> {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Stage1(self.cfg)
    }

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn d_out(&self) -> usize {
        2
    }

    fn predict(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward(g, p, x)?.fused)
    }

    fn loss(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        batch: &SequenceBatch,
        settings: &LossSettings,
    ) -> Result<Var> {
        let out = self.forward(g, p, x)?;
        let targets = batch.va_targets::<S>()?;
        stage1_combined_loss(
            g,
            out.fused,
            out.gru,
            out.transformer,
            &targets,
            settings.heads,
        )
    }
}
