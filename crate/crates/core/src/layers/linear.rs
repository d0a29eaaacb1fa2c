use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamId, ParamInit, ParamSet};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Affine map over the last axis: `x · W + b`.
pub fn linear_forward<S: Scalar>(g: &mut Graph<S>, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let mut init = ParamInit::new(rng);
        let w = params.add(format!("{name}.w"), init.weight(d_in, d_out))?;
        let b = params.add(format!("{name}.b"), init.bias(d_out))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        linear_forward(g, p[self.w], p[self.b], x)
    }

    /// Linear map followed by `tanh`, bounding outputs to `[-1, 1]`.
    pub fn forward_tanh<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        g.tanh(y)
    }
}
