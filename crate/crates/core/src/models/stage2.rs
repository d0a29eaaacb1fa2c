use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelSpec, SequenceModel};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::layers::{Bound, Gru, Linear, LocalAttention, ParamSet};
use crate::losses::LossSettings;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Stacker over fold score vectors: GRU stack, local attention layers,
/// tanh VA head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage2Config {
    /// `2K` for `K` folds.
    pub d_in: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub attn_layers: usize,
    pub d_attn: usize,
    pub radius: usize,
}

impl Stage2Config {
    pub fn new(k_folds: usize) -> Self {
        Self {
            d_in: 2 * k_folds,
            gru_hidden: 256,
            gru_layers: 4,
            attn_layers: 2,
            d_attn: 64,
            radius: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Model<S> {
    pub cfg: Stage2Config,
    pub params: ParamSet<S>,
    pub gru: Gru,
    pub attention: Vec<LocalAttention>,
    pub head: Linear,
}

impl<S: Scalar> Stage2Model<S> {
    pub fn new(cfg: Stage2Config, seed: u64) -> Result<Self> {
        if cfg.d_in == 0 || !cfg.d_in.is_multiple_of(2) {
            return Err(Error::config(format!(
                "stage-2 input width {} must be 2K for K folds",
                cfg.d_in
            )));
        }
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
        let attention = (0..cfg.attn_layers)
            .map(|i| {
                LocalAttention::new(
                    &mut params,
                    &mut rng,
                    &format!("local{i}"),
                    cfg.gru_hidden,
                    cfg.d_attn,
                    cfg.radius,
                )
            })
            .collect::<Result<_>>()?;
        let head = Linear::new(&mut params, &mut rng, "head", cfg.gru_hidden, 2)?;
        Ok(Self {
            cfg,
            params,
            gru,
            attention,
            head,
        })
    }

    /// `[B, T, 2K]` fold scores to `[B, T, 2]` VA in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let d = g.shape(x).last().copied().unwrap_or(0);
        if d != self.cfg.d_in {
            return Err(Error::Checkpoint(format!(
                "stage-2 model expects {}-dim fold scores, got {d}",
                self.cfg.d_in
            )));
        }
        let (mut h, _) = self.gru.forward(g, p, x, None)?;
        for la in &self.attention {
            h = la.forward(g, p, h)?;
        }
        self.head.forward_tanh(g, p, h)
    }
}

impl<S: Scalar> SequenceModel<S> for Stage2Model<S> {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Stage2(self.cfg)
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
        self.forward(g, p, x)
    }

    fn loss(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        batch: &SequenceBatch,
        _settings: &LossSettings,
    ) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        batch.va_targets::<S>()?.loss(g, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, Tensor};
    use rand::Rng;

    fn small() -> Stage2Config {
        Stage2Config {
            d_in: 4,
            gru_hidden: 3,
            gru_layers: 4,
            attn_layers: 2,
            d_attn: 2,
            radius: 1,
        }
    }

    fn input(t: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Tensor::new(
            vec![1, t, 4],
            (0..4 * t).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_shape_and_zero_head() {
        let mut m = Stage2Model::<f64>::new(small(), 0).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let x = g.constant(input(7));
        let y = m.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[1, 7, 2]);
        assert!(g.value(y).data().iter().all(|v| v.abs() <= 1.0));

        m.params.zero_prefix("head.");
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let x = g.constant(input(7));
        let y = m.forward(&mut g, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_width_is_checked() {
        let m = Stage2Model::<f64>::new(small(), 0).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 6]));
        assert!(matches!(
            m.forward(&mut g, &p, x),
            Err(Error::Checkpoint(_))
        ));
        assert!(Stage2Model::<f64>::new(Stage2Config { d_in: 5, ..small() }, 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Stage2Model::<f64>::new(small(), 4).unwrap();
        let x = input(6);
        let errs = grad_check_params(
            |g, vars| {
                let p = m.params.bind_vars(vars)?;
                let xv = g.constant(x.clone());
                let y = m.forward(g, &p, xv)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            },
            m.params.values(),
            1e-5,
        )
        .unwrap();
        for ((name, _), e) in m.params.iter().zip(&errs) {
            assert!(*e <= 1e-4, "{name}: {e}");
        }
    }
}
