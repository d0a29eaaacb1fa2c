use rand_chacha::ChaCha8Rng;

use super::linear::linear_forward;
use super::params::{Bound, ParamId, ParamInit, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Sinusoidal position table `[t_len, d]`:
/// `pe[t, 2i] = sin(t / 10000^(2i/d))`, `pe[t, 2i+1] = cos(...)`.
pub fn positional_encoding<S: Scalar>(t_len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        for j in 0..d {
            let i2 = (j / 2 * 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d as f64);
            data.push(S::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![t_len, d], data)
}

/// `[t_len × t_len]` mask admitting keys `s` with `|t - s| <= radius`.
pub fn local_window_mask(t_len: usize, radius: usize) -> Vec<bool> {
    let mut m = vec![false; t_len * t_len];
    for t in 0..t_len {
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(t_len - 1);
        for s in lo..=hi {
            m[t * t_len + s] = true;
        }
    }
    m
}

/// Attention weights `softmax(q kᵀ / sqrt(d_k))` over `q[G, T, d_k]`,
/// `k[G, T, d_k]`, optionally masked by a `[T × T]` pattern.
pub fn attention_weights<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d_k = g.shape(q)[2];
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, S::one() / S::of(d_k as f64).sqrt())?;
    g.softmax_masked(scores, mask)
}

/// Scaled dot-product attention: `softmax(q kᵀ / sqrt(d_k)) v`.
pub fn scaled_dot_attention<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let alpha = attention_weights(g, q, k, mask)?;
    g.bmm(alpha, v, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "transformer width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::config(format!(
                "transformer d_ff {} must be >= d_model {}",
                self.d_ff, self.d_model
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Pre-norm Transformer encoder block:
/// `y = x + MHA(LN1(x))`, `out = y + FFN(LN2(y))`, bidirectional attention.
///
/// `w_q`, `w_k`, `w_v` are `d × d`; column block `h·d_head..(h+1)·d_head`
/// is head `h`'s projection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cfg: TransformerConfig,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: TransformerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let mut init = ParamInit::new(rng);
        let mut add = |suffix: &str, t: Tensor<S>| params.add(format!("{name}.{suffix}"), t);
        Ok(Self {
            cfg,
            ln1_g: add("ln1_g", init.gain(d))?,
            ln1_b: add("ln1_b", init.bias(d))?,
            w_q: add("w_q", init.weight(d, d))?,
            w_k: add("w_k", init.weight(d, d))?,
            w_v: add("w_v", init.weight(d, d))?,
            w_o: add("w_o", init.weight(d, d))?,
            ln2_g: add("ln2_g", init.gain(d))?,
            ln2_b: add("ln2_b", init.bias(d))?,
            w_1: add("w_1", init.weight(d, ff))?,
            b_1: add("b_1", init.bias(ff))?,
            w_2: add("w_2", init.weight(ff, d))?,
            b_2: add("b_2", init.bias(d))?,
        })
    }

    /// Multi-head self-attention over `x[B, T, d]` (no normalisation, no
    /// residual), optionally restricted by a `[T × T]` mask.
    pub fn attention<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.cfg.heads, self.cfg.d_head());
        let split = |g: &mut Graph<S>, w: ParamId| -> Result<Var> {
            let y = g.matmul(x, p[w])?;
            let y = g.reshape(y, &[b, t, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * h, t, dh])
        };
        let q = split(g, self.w_q)?;
        let k = split(g, self.w_k)?;
        let v = split(g, self.w_v)?;
        let ctx = scaled_dot_attention(g, q, k, v, mask)?;
        let ctx = g.reshape(ctx, &[b, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        g.matmul(ctx, p[self.w_o])
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.d_model {
            return Err(Error::Dimension {
                op: "transformer_block_forward",
                lhs: s,
                rhs: vec![0, 0, self.cfg.d_model],
            });
        }
        let eps = S::of(LN_EPS);
        let n1 = g.layer_norm(x, p[self.ln1_g], p[self.ln1_b], eps)?;
        let att = self.attention(g, p, n1, None)?;
        let y = g.add(x, att)?;

        let n2 = g.layer_norm(y, p[self.ln2_g], p[self.ln2_b], eps)?;
        let hidden = linear_forward(g, p[self.w_1], p[self.b_1], n2)?;
        let hidden = g.relu(hidden)?;
        let ff = linear_forward(g, p[self.w_2], p[self.b_2], hidden)?;
        g.add(y, ff)
    }

    /// Output-side parameters of the two residual branches; zeroing them
    /// turns the block into the identity.
    pub fn residual_branch_params(&self) -> [ParamId; 3] {
        [self.w_o, self.w_2, self.b_2]
    }
}

/// Adds the sinusoidal table to `x[B, T, d]`.
pub fn add_positional_encoding<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let pe = positional_encoding::<S>(t, d);
    let mut data = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        data.extend_from_slice(pe.data());
    }
    let pe = g.constant(Tensor::from_parts(s, data));
    g.add(x, pe)
}

/// Windowed self-attention with residual:
/// `out_t = x_t + Σ_{|t-s| <= w} α_{t,s} x_s W_V`, where `α` is the softmax
/// over the window of `(x_t W_Q)(x_s W_K)ᵀ / sqrt(d_a)`.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    pub radius: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl LocalAttention {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_attn: usize,
        radius: usize,
    ) -> Result<Self> {
        if d_model == 0 || d_attn == 0 {
            return Err(Error::config("local attention widths must be positive"));
        }
        let mut init = ParamInit::new(rng);
        Ok(Self {
            radius,
            d_model,
            d_attn,
            w_q: params.add(format!("{name}.w_q"), init.weight(d_model, d_attn))?,
            w_k: params.add(format!("{name}.w_k"), init.weight(d_model, d_attn))?,
            w_v: params.add(format!("{name}.w_v"), init.weight(d_model, d_model))?,
        })
    }

    fn check(&self, g: &Graph<impl Scalar>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::Dimension {
                op: "local_attention_forward",
                lhs: s.to_vec(),
                rhs: vec![0, 0, self.d_model],
            });
        }
        Ok(())
    }

    /// Window weights `α[B, T, T]`; rows sum to one over the window.
    pub fn weights<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        self.check(g, x)?;
        let t = g.shape(x)[1];
        let q = g.matmul(x, p[self.w_q])?;
        let k = g.matmul(x, p[self.w_k])?;
        let mask = local_window_mask(t, self.radius);
        attention_weights(g, q, k, Some(&mask))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let alpha = self.weights(g, p, x)?;
        let v = g.matmul(x, p[self.w_v])?;
        let ctx = g.bmm(alpha, v, false)?;
        g.add(x, ctx)
    }
}
