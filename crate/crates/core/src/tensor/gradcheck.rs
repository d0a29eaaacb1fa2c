//! Central finite-difference gradient checker.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    let denom = S::one().max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / denom
}

fn check_eps<S: Scalar>(eps: S) -> Result<()> {
    if !(eps > S::zero() && eps <= S::of(1e-2)) {
        return Err(Error::contract(format!(
            "grad_check eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    Ok(())
}

fn scalar_value<S: Scalar>(g: &Graph<S>, loss: Var) -> Result<S> {
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Maximum relative error between the tape gradient of `f` at `x` and the
/// central difference `(f(x+eps) - f(x-eps)) / 2eps`, over all elements.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    grad_check_params(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps).map(|errs| errs[0])
}

/// Gradient check over several inputs at once. `f` receives one leaf per
/// tensor in `params`; the result holds the max relative error per input.
pub fn grad_check_params<S, F>(f: F, params: &[Tensor<S>], eps: S) -> Result<Vec<S>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    scalar_value(&g, loss)?;
    let grads = g.backward(loss)?;

    let eval = |values: &[Tensor<S>]| -> Result<S> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        scalar_value(&g, loss)
    };

    let mut work: Vec<Tensor<S>> = params.to_vec();
    let two_eps = eps + eps;
    let mut out = Vec::with_capacity(params.len());
    for (pi, &v) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(v) {
            Some(a) => a,
            None => {
                zeros = vec![S::zero(); params[pi].numel()];
                &zeros
            }
        };
        let mut worst = S::zero();
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / two_eps;
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        out.push(worst);
    }
    Ok(out)
}
