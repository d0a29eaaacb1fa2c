//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value and the information its
//! backward rule needs. Node ids grow monotonically, so the node list is
//! already in topological order and `backward` is a single reverse sweep.

use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Affine {
        x: Var,
        scale: S,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Powf {
        x: Var,
        exponent: S,
    },
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Stack {
        parts: Vec<Var>,
        axis: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gather {
        x: Var,
        indices: Rc<[usize]>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBias(..) => "add_bias",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Powf { .. } => "powf",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat",
            Op::Stack { .. } => "stack",
            Op::Select { .. } => "select",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient buffer of `var`, or `None` when it does not require grad or
    /// the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Single-threaded tape of recorded ops.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn same_shape(a: &[usize], b: &[usize]) -> bool {
    a == b
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                index: self.nodes.len(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![S::zero(); m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// Batched product over the leading axis: `a[g, m, k] · b[g, k, n]`, or
    /// `a[g, m, k] · b[g, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![S::zero(); g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for gi in 0..g {
            let ab = &da[gi * m * k..(gi + 1) * m * k];
            let bb = &db[gi * k * n..(gi + 1) * k * n];
            let cb = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, ab, bb, cb);
            } else {
                gemm_nn(m, k, n, ab, bb, cb);
            }
        }
        self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if same_shape(sa, sb) || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        let shape = self.broadcast_shape(op.name(), a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let n = shape.iter().product::<usize>();
        let out: Vec<S> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = da[0];
            db.iter().map(|&y| f(x, y)).collect()
        };
        debug_assert_eq!(out.len(), n);
        self.push(Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a bias vector `b[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.is_empty() || sb.len() != 1 || sb[0] != sx[sx.len() - 1] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let n = sb[0];
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Tensor::from_parts(sx, out), Op::AddBias(x, b), &[x, b])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var> {
        let t = self.map(x, |v| scale * v + shift);
        self.push(t, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.affine(x, c, S::zero())
    }

    fn map(&self, x: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let v = self.value(x);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.tanh());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| if v > S::zero() { v } else { S::zero() });
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.ln());
        self.push(t, Op::Log(x), &[x])
    }

    /// `x^exponent` for non-negative `x`.
    pub fn powf(&mut self, x: Var, exponent: S) -> Result<Var> {
        let t = self.map(x, |v| v.powf(exponent));
        self.push(t, Op::Powf { x, exponent }, &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        let t = self.map(x, |v| v.max(lo).min(hi));
        self.push(t, Op::Clamp { x, lo, hi }, &[x])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s: S = d.iter().copied().sum::<S>() / S::of(d.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.is_empty() {
            return Err(Error::contract("concat needs rank >= 1"));
        }
        let lead = &s0[..s0.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len() || &sp[..sp.len() - 1] != lead {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: sp.to_vec(),
                });
            }
            widths.push(sp[sp.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(*first).numel() / widths[0];
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = s0;
        *shape.last_mut().unwrap() = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec()),
            parts,
        )
    }

    /// Stacks equal-shaped tensors along a new axis at position `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis > s0.len() {
            return Err(Error::contract(format!(
                "stack axis {axis} out of range for rank {}",
                s0.len()
            )));
        }
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(Error::Dimension {
                    op: "stack",
                    lhs: s0.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * parts.len());
        for o in 0..outer {
            for &p in parts {
                out.extend_from_slice(&self.data(p)[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s0;
        shape.insert(axis, parts.len());
        self.push(
            Tensor::from_parts(shape, out),
            Op::Stack {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::contract(format!(
                "select({axis}, {index}) out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * s[axis] + index) * inner;
            out.extend_from_slice(&d[base..base + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Select { x, axis, index },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract(format!(
                "invalid permutation {perm:?} for shape {s:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(self.data(x), &s, perm);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Flat-index gather into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: Rc<[usize]>) -> Result<Var> {
        let d = self.data(x);
        if indices.is_empty() {
            return Err(Error::contract("gather with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {} elements",
                d.len()
            )));
        }
        let out: Vec<S> = indices.iter().map(|&i| d[i]).collect();
        self.push(
            Tensor::from_parts(vec![out.len()], out),
            Op::Gather { x, indices },
            &[x],
        )
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis where `mask` (row-major over the trailing
    /// two axes, repeated over leading ones) marks admissible entries.
    /// Masked entries get probability exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::contract("softmax of a scalar"))?;
        if let Some(m) = mask {
            if m.len() % n != 0 || !self.value(x).numel().is_multiple_of(m.len()) {
                return Err(Error::Dimension {
                    op: "softmax_masked",
                    lhs: s,
                    rhs: vec![m.len()],
                });
            }
        }
        let d = self.data(x);
        let mut out = vec![S::zero(); d.len()];
        for (r, (row, orow)) in d.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mrow = mask.map(|m| {
                let mr = m.len() / n;
                &m[(r % mr) * n..(r % mr + 1) * n]
            });
            let allowed = |j: usize| mrow.is_none_or(|m| m[j]);
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::contract(format!("softmax row {r} is fully masked")));
            }
            let mut total = S::zero();
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if allowed(j) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        self.push(Tensor::from_parts(s, out), Op::Softmax(x), &[x])
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::contract("layer_norm of a scalar"))?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (d, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let nn = S::of(n as f64);
        let mut xhat = vec![S::zero(); d.len()];
        let mut rstd = Vec::with_capacity(d.len() / n);
        let mut out = vec![S::zero(); d.len()];
        for ((row, hrow), orow) in d.chunks(n).zip(xhat.chunks_mut(n)).zip(out.chunks_mut(n)) {
            let mu = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / nn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..n {
                hrow[j] = (row[j] - mu) * r;
                orow[j] = g[j] * hrow[j] + b[j];
            }
        }
        self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a one-element `loss`. Gradients accumulate
    /// additively across fan-out; only leaves keep theirs in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Runs `kernel` against `v`'s gradient buffer in place, allocating a
    /// zeroed one on first use. `kernel` must add into the buffer.
    fn accumulate_with(&self, grads: &mut [Option<Vec<S>>], v: Var, kernel: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.value(v).numel();
        kernel(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]));
    }

    /// Reduces a broadcast gradient back onto operand `v`.
    fn reduce_to(&self, v: Var, g: Vec<S>) -> Vec<S> {
        if self.value(v).numel() == g.len() {
            g
        } else {
            vec![g.iter().copied().sum()]
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let sb = self.shape(b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(a).numel() / k;
                self.accumulate_with(grads, a, |da| gemm_nt(m, n, k, g, self.data(b), da));
                self.accumulate_with(grads, b, |db| gemm_tn(k, m, n, self.data(a), g, db));
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(a);
                let (gn, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.data(a), self.data(b));
                self.accumulate_with(grads, a, |da| {
                    for gi in 0..gn {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let out = &mut da[gi * m * k..(gi + 1) * m * k];
                        if trans_b {
                            gemm_nn(m, n, k, gb, bb, out);
                        } else {
                            gemm_nt(m, n, k, gb, bb, out);
                        }
                    }
                });
                self.accumulate_with(grads, b, |db| {
                    for gi in 0..gn {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &ad[gi * m * k..(gi + 1) * m * k];
                        let out = &mut db[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            gemm_tn(n, m, k, gb, ab, out);
                        } else {
                            gemm_tn(k, m, n, ab, gb, out);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    let r = self.reduce_to(a, g.to_vec());
                    self.accumulate(grads, a, r);
                }
                if self.needs(b) {
                    let r = self.reduce_to(b, g.to_vec());
                    self.accumulate(grads, b, r);
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    let r = self.reduce_to(a, g.to_vec());
                    self.accumulate(grads, a, r);
                }
                if self.needs(b) {
                    let r = self.reduce_to(b, g.iter().map(|&v| -v).collect());
                    self.accumulate(grads, b, r);
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                let at = |i: usize, d: &[S]| if d.len() == 1 { d[0] } else { d[i] };
                if self.needs(a) {
                    let r: Vec<S> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * at(i, bd))
                        .collect();
                    let r = self.reduce_to(a, r);
                    self.accumulate(grads, a, r);
                }
                if self.needs(b) {
                    let r: Vec<S> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * at(i, ad))
                        .collect();
                    let r = self.reduce_to(b, r);
                    self.accumulate(grads, b, r);
                }
            }
            &Op::Div(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                let at = |i: usize, d: &[S]| if d.len() == 1 { d[0] } else { d[i] };
                if self.needs(a) {
                    let r: Vec<S> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv / at(i, bd))
                        .collect();
                    let r = self.reduce_to(a, r);
                    self.accumulate(grads, a, r);
                }
                if self.needs(b) {
                    let r: Vec<S> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let bv = at(i, bd);
                            -gv * at(i, ad) / (bv * bv)
                        })
                        .collect();
                    let r = self.reduce_to(b, r);
                    self.accumulate(grads, b, r);
                }
            }
            &Op::AddBias(x, b) => {
                if self.needs(x) {
                    self.accumulate(grads, x, g.to_vec());
                }
                if self.needs(b) {
                    let n = self.value(b).numel();
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Affine { x, scale } => {
                self.accumulate(grads, x, g.iter().map(|&v| v * scale).collect());
            }
            &Op::Sigmoid(x) => {
                let r = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &s)| gv * s * (S::one() - s))
                    .collect();
                self.accumulate(grads, x, r);
            }
            &Op::Tanh(x) => {
                let r = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &t)| gv * (S::one() - t * t))
                    .collect();
                self.accumulate(grads, x, r);
            }
            &Op::Relu(x) => {
                let xd = self.data(x);
                let r = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accumulate(grads, x, r);
            }
            &Op::Log(x) => {
                let xd = self.data(x);
                let r = g.iter().zip(xd).map(|(&gv, &v)| gv / v).collect();
                self.accumulate(grads, x, r);
            }
            &Op::Powf { x, exponent } => {
                let xd = self.data(x);
                let r = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| {
                        if exponent == S::zero() {
                            S::zero()
                        } else {
                            gv * exponent * v.powf(exponent - S::one())
                        }
                    })
                    .collect();
                self.accumulate(grads, x, r);
            }
            &Op::Clamp { x, lo, hi } => {
                let xd = self.data(x);
                let r = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v >= lo && v <= hi { gv } else { S::zero() })
                    .collect();
                self.accumulate(grads, x, r);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0] / S::of(n as f64); n]);
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            let base = r * total + offset;
                            dp.extend_from_slice(&g[base..base + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Stack { parts, axis } => {
                let s0 = self.shape(parts[0]);
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[*axis..].iter().product();
                let np = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            let base = (o * np + pi) * inner;
                            dp.extend_from_slice(&g[base..base + inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                }
            }
            &Op::Select { x, axis, index } => {
                let s = self.shape(x);
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let extent = s[axis];
                self.accumulate_with(grads, x, |dx| {
                    for o in 0..outer {
                        let base = (o * extent + index) * inner;
                        for (d, &gv) in dx[base..base + inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                        {
                            *d += gv;
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, g.to_vec());
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = permute_data(g, node.value.shape(), &inv);
                self.accumulate(grads, *x, dx);
            }
            &Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![S::zero(); g.len()];
                for ((grow, yrow), drow) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                    let inner: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - inner);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).numel();
                let gd = self.data(*gain);
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![S::zero(); n];
                    let mut db = vec![S::zero(); n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
                if self.needs(*x) {
                    let nn = S::of(n as f64);
                    let mut dx = vec![S::zero(); g.len()];
                    let rows = g.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n));
                    for (((grow, hrow), drow), &r) in rows.zip(rstd) {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..n {
                            let dh = grow[j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= nn;
                        mean_dh_h /= nn;
                        for j in 0..n {
                            let dh = grow[j] * gd[j];
                            drow[j] = r * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gather { x, indices } => {
                self.accumulate_with(grads, *x, |dx| {
                    for (&i, &gv) in indices.iter().zip(g) {
                        dx[i] += gv;
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = g.constant(Tensor::eye(3));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn zero_matmul() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(t(&[3, 4], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let y = g.matmul(z, b).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0f64));
        let s = g.sigmoid(z).unwrap();
        let th = g.tanh(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(th).item(), 0.0);
    }

    #[test]
    fn concat_shape_law() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 4]));
        let b = g.constant(Tensor::ones(&[2, 3, 6]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 10]);
        assert_eq!(g.value(c).data()[3], 0.0);
        assert_eq!(g.value(c).data()[4], 1.0);
    }

    #[test]
    fn incompatible_elementwise_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_rows() {
        let mut g = Graph::new();
        let u = g.constant(t(&[1, 4], &[0.3; 4]));
        let s = g.softmax(u).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(big).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let mask = [true, false, true, false, true, false];
        let s = g.softmax_masked(x, Some(&mask)).unwrap();
        let d = g.value(s).data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
        assert_eq!(d[4], 1.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0f64));
        assert!(matches!(g.log(z), Err(Error::NonFinite { op: "log", .. })));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_sums_branches() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[0.3, -0.7]));
        let a = g.tanh(x).unwrap();
        let b = g.scale(x, 3.0).unwrap();
        let c = g.add(a, b).unwrap();
        let l = g.sum(c).unwrap();
        let grads = g.backward(l).unwrap();
        let xs = [0.3f64, -0.7];
        for (i, &gv) in grads.get(x).unwrap().iter().enumerate() {
            let want = (1.0 - xs[i].tanh().powi(2)) + 3.0;
            assert!((gv - want).abs() < 1e-15);
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(t(
            &[2, 3, 4],
            &(0..24).map(|v| v as f64).collect::<Vec<_>>(),
        ));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(g.value(p).data()[1], 4.0);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn stack_and_select_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let s = g.stack(&[a, b], 1).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 2]);
        let back = g.select(s, 1, 1).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }
}
