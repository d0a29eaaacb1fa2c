use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::OptimizerKind;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam or momentum SGD, with one state buffer set per parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<S> {
    Adam {
        m: Vec<Vec<S>>,
        v: Vec<Vec<S>>,
        t: u64,
    },
    Sgd {
        momentum: f64,
        velocity: Vec<Vec<S>>,
    },
}

fn zeros_like<S: Scalar>(params: &ParamSet<S>) -> Vec<Vec<S>> {
    params
        .values()
        .iter()
        .map(|p| vec![S::zero(); p.numel()])
        .collect()
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, momentum: f64, params: &ParamSet<S>) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                m: zeros_like(params),
                v: zeros_like(params),
                t: 0,
            },
            OptimizerKind::Sgd => Optimizer::Sgd {
                momentum,
                velocity: zeros_like(params),
            },
        }
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter; `None`
    /// means the loss did not touch it and counts as a zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        grads: &[Option<Vec<S>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params.values()[i].numel() || g.iter().any(|x| !x.is_finite()) {
                    let name = params
                        .iter()
                        .nth(i)
                        .map(|(n, _)| n.to_string())
                        .unwrap_or_default();
                    return Err(Error::NonFiniteGradient(name));
                }
            }
        }
        let lr = S::of(lr);
        match self {
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let (b1, b2) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2));
                let bc1 = S::one() - b1.powi(*t as i32);
                let bc2 = S::one() - b2.powi(*t as i32);
                let eps = S::of(ADAM_EPS);
                for (i, p) in params.values_mut().iter_mut().enumerate() {
                    let (mi, vi) = (&mut m[i], &mut v[i]);
                    let g = grads[i].as_deref();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let gj = g.map_or(S::zero(), |g| g[j]);
                        mi[j] = b1 * mi[j] + (S::one() - b1) * gj;
                        vi[j] = b2 * vi[j] + (S::one() - b2) * gj * gj;
                        let m_hat = mi[j] / bc1;
                        let v_hat = vi[j] / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            Optimizer::Sgd { momentum, velocity } => {
                let mu = S::of(*momentum);
                for (i, p) in params.values_mut().iter_mut().enumerate() {
                    let vel = &mut velocity[i];
                    let g = grads[i].as_deref();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        vel[j] = mu * vel[j] + g.map_or(S::zero(), |g| g[j]);
                        *w -= lr * vel[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Named state tensors for checkpointing, in parameter order.
    pub fn state_tensors(&self, params: &ParamSet<S>) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, bufs: &[Vec<S>]| {
            for ((name, p), b) in params.iter().zip(bufs) {
                let data = b.iter().map(|x| x.as_f64()).collect();
                out.push((
                    format!("{prefix}{name}"),
                    Tensor::new(p.shape().to_vec(), data).expect("shape"),
                ));
            }
        };
        match self {
            Optimizer::Adam { m, v, t } => {
                push("opt.m.", m);
                push("opt.v.", v);
                out.push(("opt.t".into(), Tensor::scalar(*t as f64)));
            }
            Optimizer::Sgd { velocity, .. } => push("opt.vel.", velocity),
        }
        out
    }

    /// Restores buffers written by [`Optimizer::state_tensors`].
    pub fn load_state(
        &mut self,
        params: &ParamSet<S>,
        tensors: &[(String, Tensor<f64>)],
    ) -> Result<()> {
        let find = |key: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))
        };
        let fill = |prefix: &str, bufs: &mut Vec<Vec<S>>| -> Result<()> {
            for ((name, p), b) in params.iter().zip(bufs.iter_mut()) {
                let t = find(&format!("{prefix}{name}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for `{name}` has the wrong shape"
                    )));
                }
                *b = t.data().iter().map(|&x| S::of(x)).collect();
            }
            Ok(())
        };
        match self {
            Optimizer::Adam { m, v, t } => {
                fill("opt.m.", m)?;
                fill("opt.v.", v)?;
                *t = find("opt.t")?.item() as u64;
            }
            Optimizer::Sgd { velocity, .. } => fill("opt.vel.", velocity)?,
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<Vec<S>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = S::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(x)).unwrap();
        p
    }

    /// Adam written out longhand for a single scalar.
    fn adam_oracle(x0: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> f64 {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = grad(x);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        x
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &p);
        opt.step(&mut p, &[Some(vec![2.0])], 0.1).unwrap();
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + ε).
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.values()[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_longhand_on_quadratic() {
        let mut p = one_param(1.5);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &p);
        for _ in 0..50 {
            let x = p.values()[0].item();
            opt.step(&mut p, &[Some(vec![2.0 * x])], 0.05).unwrap();
        }
        let want = adam_oracle(1.5, 0.05, 50, |x| 2.0 * x);
        assert!((p.values()[0].item() - want).abs() < 1e-14);
    }

    #[test]
    fn sgd_momentum_longhand() {
        let mut p = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.9, &p);
        let (mut x, mut vel) = (1.0, 0.0);
        for _ in 0..20 {
            let g = 2.0 * p.values()[0].item();
            opt.step(&mut p, &[Some(vec![g])], 0.01).unwrap();
            vel = 0.9 * vel + 2.0 * x;
            x -= 0.01 * vel;
        }
        assert!((p.values()[0].item() - x).abs() < 1e-15);
    }

    fn run_on_square(kind: OptimizerKind, momentum: f64, lr: f64, steps: usize) -> f64 {
        let mut p = one_param(1.0);
        let mut opt = Optimizer::new(kind, momentum, &p);
        for _ in 0..steps {
            let g = 2.0 * p.values()[0].item();
            opt.step(&mut p, &[Some(vec![g])], lr).unwrap();
        }
        p.values()[0].item()
    }

    #[test]
    fn adam_hundred_steps_on_square() {
        let x = run_on_square(OptimizerKind::Adam, 0.0, 0.1, 100);
        assert!(x.abs() < 0.05, "{x}");
        assert!((x - adam_oracle(1.0, 0.1, 100, |x| 2.0 * x)).abs() < 1e-14);
    }

    #[test]
    fn sgd_closed_forms() {
        // No momentum: x ← x − lr·2x.
        assert!((run_on_square(OptimizerKind::Sgd, 0.0, 0.1, 3) - 0.8f64.powi(3)).abs() < 1e-15);
        // Constant gradient, two steps: lr·g·(1 + 1.9).
        let mut p = one_param(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.9, &p);
        for _ in 0..2 {
            opt.step(&mut p, &[Some(vec![0.5])], 0.1).unwrap();
        }
        assert!((p.values()[0].item() + 0.1 * 0.5 * 2.9).abs() < 1e-15);
        assert!(run_on_square(OptimizerKind::Sgd, 0.9, 0.1, 300).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_alone_and_decays_moments() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut p = one_param(0.7);
            let mut opt = Optimizer::new(kind, 0.9, &p);
            opt.step(&mut p, &[Some(vec![0.0])], 0.1).unwrap();
            assert_eq!(p.values()[0].item(), 0.7);
        }
        let mut p = one_param(0.7);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &p);
        opt.step(&mut p, &[Some(vec![1.0])], 0.1).unwrap();
        opt.step(&mut p, &[None], 0.1).unwrap();
        let Optimizer::Adam { m, v, .. } = &opt else {
            unreachable!()
        };
        assert!((m[0][0] - 0.09).abs() < 1e-15);
        assert!((v[0][0] - 0.000999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = one_param(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &p);
        match opt.step(&mut p, &[Some(vec![f64::NAN])], 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.values()[0].item(), 0.0);
    }

    #[test]
    fn state_round_trip() {
        let mut p = one_param(1.0);
        p.add("w", Tensor::zeros(&[2, 3])).unwrap();
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.9, &p);
            opt.step(
                &mut p,
                &[Some(vec![0.3]), Some((0..6).map(f64::from).collect())],
                0.1,
            )
            .unwrap();
            let mut back = Optimizer::new(kind, 0.9, &p);
            back.load_state(&p, &opt.state_tensors(&p)).unwrap();
            assert_eq!(back, opt);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(vec![3.0f64]), None, Some(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        let mut g = vec![Some(vec![0.3f64, 0.4])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].as_deref(), Some(&[0.3, 0.4][..]));
    }
}
