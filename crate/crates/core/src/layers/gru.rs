use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamId, ParamInit, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// One GRU layer.
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// h̃  = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl GruLayer {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
    ) -> Result<Self> {
        let mut init = ParamInit::new(rng);
        let mut w = |suffix: &str, rows: usize| {
            params.add(format!("{name}.{suffix}"), init.weight(rows, d_hidden))
        };
        let w_z = w("w_z", d_in)?;
        let w_r = w("w_r", d_in)?;
        let w_h = w("w_h", d_in)?;
        let u_z = w("u_z", d_hidden)?;
        let u_r = w("u_r", d_hidden)?;
        let u_h = w("u_h", d_hidden)?;
        let b_z = params.add(format!("{name}.b_z"), Tensor::zeros(&[d_hidden]))?;
        let b_r = params.add(format!("{name}.b_r"), Tensor::zeros(&[d_hidden]))?;
        let b_h = params.add(format!("{name}.b_h"), Tensor::zeros(&[d_hidden]))?;
        Ok(Self {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            d_in,
            d_hidden,
        })
    }

    /// Runs the layer over `x[B, T, d_in]` from `h0[B, d_hidden]`.
    /// Returns the output sequence `[B, T, d_hidden]` and the last state.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        h0: Var,
    ) -> Result<(Var, Var)> {
        let t_len = g.shape(x)[1];
        // Input projections for all time steps at once.
        let xz = g.matmul(x, p[self.w_z])?;
        let xz = g.add_bias(xz, p[self.b_z])?;
        let xr = g.matmul(x, p[self.w_r])?;
        let xr = g.add_bias(xr, p[self.b_r])?;
        let xh = g.matmul(x, p[self.w_h])?;
        let xh = g.add_bias(xh, p[self.b_h])?;

        let mut h = h0;
        let mut outputs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xz_t = g.select(xz, 1, t)?;
            let xr_t = g.select(xr, 1, t)?;
            let xh_t = g.select(xh, 1, t)?;

            let hz = g.matmul(h, p[self.u_z])?;
            let z = g.add(xz_t, hz)?;
            let z = g.sigmoid(z)?;

            let hr = g.matmul(h, p[self.u_r])?;
            let r = g.add(xr_t, hr)?;
            let r = g.sigmoid(r)?;

            let rh = g.mul(r, h)?;
            let hh = g.matmul(rh, p[self.u_h])?;
            let cand = g.add(xh_t, hh)?;
            let cand = g.tanh(cand)?;

            // (1 - z) ⊙ h + z ⊙ h̃  ==  h + z ⊙ (h̃ - h)
            let delta = g.sub(cand, h)?;
            let step = g.mul(z, delta)?;
            h = g.add(h, step)?;
            outputs.push(h);
        }
        let y = g.stack(&outputs, 1)?;
        Ok((y, h))
    }
}

/// Stack of GRU layers; layer `l` consumes layer `l - 1`'s output sequence.
#[derive(Clone, Debug)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
}

impl Gru {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        n_layers: usize,
    ) -> Result<Self> {
        if n_layers == 0 || d_hidden == 0 || d_in == 0 {
            return Err(Error::config(format!(
                "GRU `{name}` needs positive sizes, got d_in={d_in} d_hidden={d_hidden} layers={n_layers}"
            )));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let din = if l == 0 { d_in } else { d_hidden };
                GruLayer::new(params, rng, &format!("{name}.l{l}"), din, d_hidden)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn d_hidden(&self) -> usize {
        self.layers[0].d_hidden
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    /// `x[B, T, d_in]`, optional `h0[L, B, d_hidden]` (zeros when absent).
    /// Returns the top layer's sequence `[B, T, d_hidden]` and the final
    /// states `[L, B, d_hidden]`.
    ///
    /// An empty sequence cannot reach this point: tensors never have a zero
    /// extent, so `T == 0` fails at construction.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        h0: Option<Var>,
    ) -> Result<(Var, Var)> {
        let sx = g.shape(x).to_vec();
        if sx.len() != 3 || sx[2] != self.d_in() {
            return Err(Error::Dimension {
                op: "gru_forward",
                lhs: sx,
                rhs: vec![0, 0, self.d_in()],
            });
        }
        let (b, dh, nl) = (sx[0], self.d_hidden(), self.layers.len());
        if let Some(h0) = h0 {
            if g.shape(h0) != [nl, b, dh] {
                return Err(Error::Dimension {
                    op: "gru_forward(h0)",
                    lhs: g.shape(h0).to_vec(),
                    rhs: vec![nl, b, dh],
                });
            }
        }
        let mut seq = x;
        let mut finals = Vec::with_capacity(nl);
        for (l, layer) in self.layers.iter().enumerate() {
            let h_init = match h0 {
                Some(h0) => g.select(h0, 0, l)?,
                None => g.constant(Tensor::zeros(&[b, dh])),
            };
            let (y, h_last) = layer.forward(g, p, seq, h_init)?;
            seq = y;
            finals.push(h_last);
        }
        let h_t = g.stack(&finals, 0)?;
        Ok((seq, h_t))
    }
}
