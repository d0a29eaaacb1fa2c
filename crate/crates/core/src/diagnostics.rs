//! Finite-difference gradient audit over every trainable building block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{Gru, Linear, LocalAttention, ParamSet, TransformerBlock, TransformerConfig};
use crate::losses::{ccc_loss, focal_loss};
use crate::models::{
    AuConfig, AuFusion, AuModel, SequenceModel, Stage1Config, Stage1Model, Stage2Config,
    Stage2Model,
};
use crate::tensor::{grad_check_params, Graph, Tensor, Var};

/// Relative-error bound every check must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    /// `[B, T, d]` of the input the check ran on.
    pub shape: [usize; 3],
    /// Worst relative error over all parameters and the input.
    pub max_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= GRAD_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Checks `f(params, x)` against central differences in every parameter
/// and in the input.
fn check(
    name: String,
    params: &ParamSet<f64>,
    x: Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, &crate::layers::Bound, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let s = x.shape();
    let shape = [s[0], s[1], s[2]];
    let mut tensors = params.values().to_vec();
    tensors.push(x);
    let n = params.len();
    let errs = grad_check_params(
        |g, vars| {
            let p = params.bind_vars(&vars[..n])?;
            f(g, &p, vars[n])
        },
        &tensors,
        EPS,
    )?;
    Ok(GradCheck {
        name,
        shape,
        max_error: errs.into_iter().fold(0.0, f64::max),
    })
}

/// `Σ r ⊙ y` for a fixed random `r`, so every output element carries a
/// distinct weight.
fn probe(g: &mut Graph<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = random(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Runs the full audit on random shapes up to `(2, 8, 8)` drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=2);
    let t = rng.random_range(2..=8);
    // Even widths so two attention heads always divide them.
    let d = 2 * rng.random_range(1..=4);
    let mut out = Vec::new();
    let input = |rng: &mut ChaCha8Rng, d: usize| random(rng, &[b, t, d], -1.0, 1.0);

    for layers in 1..=4 {
        let mut p = ParamSet::new();
        let gru = Gru::new(&mut p, &mut rng, "gru", d, 3, layers)?;
        let x = input(&mut rng, d);
        out.push(check(format!("gru/{layers}-layer"), &p, x, |g, p, x| {
            let (y, h) = gru.forward(g, p, x, None)?;
            let a = probe(g, y, 1)?;
            let c = probe(g, h, 2)?;
            g.add(a, c)
        })?);
    }

    let mut p = ParamSet::new();
    let cfg = TransformerConfig {
        d_model: d,
        heads: 2,
        d_ff: 2 * d,
    };
    let block = TransformerBlock::new(&mut p, &mut rng, "trf", cfg)?;
    let x = input(&mut rng, d);
    out.push(check("transformer-block".into(), &p, x, |g, p, x| {
        let y = block.forward(g, p, x)?;
        probe(g, y, 3)
    })?);

    for radius in [0, 2, 5] {
        let mut p = ParamSet::new();
        let la = LocalAttention::new(&mut p, &mut rng, "local", d, 3, radius)?;
        let x = input(&mut rng, d);
        out.push(check(
            format!("local-attention/w={radius}"),
            &p,
            x,
            |g, p, x| {
                let y = la.forward(g, p, x)?;
                probe(g, y, 4)
            },
        )?);
    }

    let mut p = ParamSet::new();
    let head = Linear::new(&mut p, &mut rng, "head", d, 2)?;
    let x = input(&mut rng, d);
    out.push(check("va-head".into(), &p, x, |g, p, x| {
        let y = head.forward_tanh(g, p, x)?;
        probe(g, y, 5)
    })?);

    let s1 = Stage1Model::<f64>::new(
        Stage1Config {
            d_in: d,
            gru_hidden: 3,
            gru_layers: 2,
            blocks: 1,
            heads: 2,
            ff_mult: 2,
        },
        rng.random(),
    )?;
    let x = input(&mut rng, d);
    out.push(check("stage1-model".into(), &s1.params, x, |g, p, x| {
        let o = s1.forward(g, p, x)?;
        let a = probe(g, o.fused, 6)?;
        let c = probe(g, o.gru, 7)?;
        g.add(a, c)
    })?);

    let s2 = Stage2Model::<f64>::new(
        Stage2Config {
            d_in: d,
            gru_hidden: 3,
            gru_layers: 4,
            attn_layers: 2,
            d_attn: 2,
            radius: 2,
        },
        rng.random(),
    )?;
    let x = input(&mut rng, d);
    out.push(check("stage2-model".into(), &s2.params, x, |g, p, x| {
        let y = s2.forward(g, p, x)?;
        probe(g, y, 8)
    })?);

    let au = AuModel::<f64>::new(
        AuConfig {
            d_in: d,
            d_expand: d + 2,
            t1_blocks: 1,
            t2_blocks: 1,
            heads: 2,
            ff_mult: 2,
            fusion: AuFusion::All,
        },
        rng.random(),
    )?;
    let x = input(&mut rng, d);
    let bits: Vec<u8> = (0..b * t * 12).map(|_| rng.random_range(0..=1)).collect();
    out.push(check("au-dual-branch".into(), &au.params, x, |g, p, x| {
        let prob = au.predict(g, p, x)?;
        focal_loss(g, prob, &bits, 2.0, 0.25)
    })?);

    let n = b * t;
    let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let la: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = random(&mut rng, &[b, t, 2], -0.9, 0.9);
    out.push(check("ccc-loss".into(), &ParamSet::new(), x, |g, _, x| {
        let v = g.select(x, 2, 0)?;
        let v = g.reshape(v, &[n])?;
        let a = g.select(x, 2, 1)?;
        let a = g.reshape(a, &[n])?;
        ccc_loss(g, v, a, &lv, &la)
    })?);

    let x = random(&mut rng, &[b, t, d], 0.05, 0.95);
    let bits: Vec<u8> = (0..b * t * d).map(|_| rng.random_range(0..=1)).collect();
    out.push(check(
        "focal-loss".into(),
        &ParamSet::new(),
        x,
        |g, _, x| focal_loss(g, x, &bits, 2.0, 0.25),
    )?);

    Ok(out)
}
