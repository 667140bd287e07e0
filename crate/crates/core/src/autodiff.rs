//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological sort and backward is a single reverse sweep. The operator set
//! is exactly what the denoiser and the layout losses need; each variant
//! carries its own VJP, so nothing can silently detach.
//!
//! Graphs are single-threaded by design; independent runs build independent
//! tapes.

use std::cell::{Cell, RefCell};

use crate::attention::softmax_rows_masked;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<S> {
    Leaf { requires_grad: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Affine { src: usize, mul: S },
    MulScalarNode { src: usize, scalar: usize },
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    MaskedSoftmaxRows { logits: usize },
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Narrow { src: usize, dim: usize, start: usize },
    ConcatRows(Vec<usize>),
    GatherRows { src: usize, indices: Vec<usize> },
    Gelu(usize),
    Tanh(usize),
    Abs(usize),
    SmoothMax { src: usize, temp: S, over_rows: bool },
}

impl<S> Op<S> {
    fn parents(&self, out: &mut Vec<usize>) {
        match self {
            Op::Leaf { .. } => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b)
            | Op::AddRow(a, b) | Op::Matmul(a, b) => out.extend([*a, *b]),
            Op::MulScalarNode { src, scalar } => out.extend([*src, *scalar]),
            Op::Affine { src, .. }
            | Op::Transpose(src)
            | Op::SoftmaxRows(src)
            | Op::MaskedSoftmaxRows { logits: src }
            | Op::SumAll(src)
            | Op::MeanAll(src)
            | Op::Reshape(src)
            | Op::Narrow { src, .. }
            | Op::GatherRows { src, .. }
            | Op::Gelu(src)
            | Op::Tanh(src)
            | Op::Abs(src)
            | Op::SmoothMax { src, .. } => out.push(*src),
            Op::ConcatRows(parts) => out.extend_from_slice(parts),
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
    done: Cell<bool>,
}

/// Handle to a tape node. Cheap to copy; tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(256)), done: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes and re-arms backward.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.done.set(false);
    }

    fn push(&self, value: Tensor<S>, op: Op<S>) -> Var<'_, S> {
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            other => {
                let mut ps = Vec::with_capacity(4);
                other.parents(&mut ps);
                let nodes = self.nodes.borrow();
                ps.iter().any(|&p| nodes[p].needs_grad)
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable leaf (parameter or guidance target).
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    /// Reverse sweep from a scalar loss. May be run once per tape.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if self.done.get() {
            return Err(Error::BackwardAlreadyRun);
        }
        self.done.set(true);
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), S::one())?);

        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[id] = Some(g);
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut grads, *a, g.clone())?;
                    accumulate(&nodes, &mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&nodes, &mut grads, *a, g.clone())?;
                    accumulate(&nodes, &mut grads, *b, g.scale(-S::one())?)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&nodes[*b].value)?;
                    let gb = g.mul(&nodes[*a].value)?;
                    accumulate(&nodes, &mut grads, *a, ga)?;
                    accumulate(&nodes, &mut grads, *b, gb)?;
                }
                Op::Div(a, b) => {
                    let ga = g.div(&nodes[*b].value)?;
                    let gb = g.mul(&node.value)?.div(&nodes[*b].value)?.scale(-S::one())?;
                    accumulate(&nodes, &mut grads, *a, ga)?;
                    accumulate(&nodes, &mut grads, *b, gb)?;
                }
                Op::AddRow(a, b) => {
                    let (m, n) = g.dims2()?;
                    let mut col = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            col[j] += g.data()[i * n + j];
                        }
                    }
                    accumulate(&nodes, &mut grads, *a, g)?;
                    accumulate(&nodes, &mut grads, *b, Tensor::from_vec(vec![n], col)?)?;
                }
                Op::Affine { src, mul, .. } => {
                    accumulate(&nodes, &mut grads, *src, g.scale(*mul)?)?;
                }
                Op::MulScalarNode { src, scalar } => {
                    let s = nodes[*scalar].value.item()?;
                    let gs = g.mul(&nodes[*src].value)?.sum();
                    accumulate(&nodes, &mut grads, *src, g.scale(s)?)?;
                    accumulate(&nodes, &mut grads, *scalar, Tensor::from_vec(vec![1], vec![gs])?)?;
                }
                Op::Matmul(a, b) => {
                    let ga = g.matmul_nt(&nodes[*b].value)?;
                    let gb = nodes[*a].value.matmul_tn(&g)?;
                    accumulate(&nodes, &mut grads, *a, ga)?;
                    accumulate(&nodes, &mut grads, *b, gb)?;
                }
                Op::Transpose(src) => {
                    accumulate(&nodes, &mut grads, *src, g.transpose()?)?;
                }
                Op::SoftmaxRows(src) | Op::MaskedSoftmaxRows { logits: src } => {
                    let gx = softmax_backward(&node.value, &g)?;
                    accumulate(&nodes, &mut grads, *src, gx)?;
                }
                Op::SumAll(src) => {
                    let gv = g.item()?;
                    let gx = Tensor::full(nodes[*src].value.shape(), gv)?;
                    accumulate(&nodes, &mut grads, *src, gx)?;
                }
                Op::MeanAll(src) => {
                    let n = nodes[*src].value.numel();
                    let gv = g.item()? / S::cast(n as f64);
                    let gx = Tensor::full(nodes[*src].value.shape(), gv)?;
                    accumulate(&nodes, &mut grads, *src, gx)?;
                }
                Op::Reshape(src) => {
                    let gx = g.reshape(nodes[*src].value.shape())?;
                    accumulate(&nodes, &mut grads, *src, gx)?;
                }
                Op::Narrow { src, dim, start } => {
                    let (sm, sn) = nodes[*src].value.dims2()?;
                    let (gm, gn) = g.dims2()?;
                    let mut data = vec![S::zero(); sm * sn];
                    if *dim == 0 {
                        data[start * sn..start * sn + gm * gn].copy_from_slice(g.data());
                    } else {
                        for i in 0..gm {
                            for j in 0..gn {
                                data[i * sn + start + j] = g.data()[i * gn + j];
                            }
                        }
                    }
                    accumulate(&nodes, &mut grads, *src, Tensor::from_vec(vec![sm, sn], data)?)?;
                }
                Op::ConcatRows(parts) => {
                    let (_, n) = g.dims2()?;
                    let mut row = 0;
                    for &p in parts {
                        let (pm, _) = nodes[p].value.dims2()?;
                        let gp = g.narrow(0, row, pm)?;
                        row += pm;
                        accumulate(&nodes, &mut grads, p, gp)?;
                    }
                    let _ = n;
                }
                Op::GatherRows { src, indices } => {
                    let (sm, sn) = nodes[*src].value.dims2()?;
                    let mut data = vec![S::zero(); sm * sn];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..sn {
                            data[i * sn + j] += g.data()[r * sn + j];
                        }
                    }
                    accumulate(&nodes, &mut grads, *src, Tensor::from_vec(vec![sm, sn], data)?)?;
                }
                Op::Gelu(src) => {
                    let x = &nodes[*src].value;
                    let gx = g.mul(&x.map("gelu_grad", gelu_grad::<S>)?)?;
                    accumulate(&nodes, &mut grads, *src, gx)?;
                }
                Op::Tanh(src) => {
                    let gx = g.mul(&node.value.map("tanh_grad", |y| S::one() - y * y)?)?;
                    accumulate(&nodes, &mut grads, *src, gx)?;
                }
                Op::Abs(src) => {
                    let sign = nodes[*src].value.map("sign", |x| {
                        if x > S::zero() {
                            S::one()
                        } else if x < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                    })?;
                    accumulate(&nodes, &mut grads, *src, g.mul(&sign)?)?;
                }
                Op::SmoothMax { src, temp, over_rows } => {
                    let gx = smooth_max_backward(&nodes[*src].value, &g, *temp, *over_rows)?;
                    accumulate(&nodes, &mut grads, *src, gx)?;
                }
            }
            grads[id] = None;
        }

        // Materialize zero gradients for unreached requires-grad leaves.
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: true } = node.op {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    id: usize,
    g: Tensor<S>,
) -> Result<()> {
    if !nodes[id].needs_grad {
        return Ok(());
    }
    grads[id] = Some(match grads[id].take() {
        Some(acc) => acc.add(&g)?,
        None => g,
    });
    Ok(())
}

fn softmax_backward<S: Scalar>(y: &Tensor<S>, g: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = y.dims2()?;
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let yr = &y.data()[i * n..(i + 1) * n];
        let gr = &g.data()[i * n..(i + 1) * n];
        let dot = yr.iter().zip(gr).fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
        for j in 0..n {
            out[i * n + j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

fn smooth_max_backward<S: Scalar>(
    x: &Tensor<S>,
    g: &Tensor<S>,
    temp: S,
    over_rows: bool,
) -> Result<Tensor<S>> {
    let (m, n) = x.dims2()?;
    let mut out = vec![S::zero(); m * n];
    let (outer, inner) = if over_rows { (n, m) } else { (m, n) };
    for o in 0..outer {
        let idx = |i: usize| if over_rows { i * n + o } else { o * n + i };
        let mut mx = S::neg_infinity();
        for i in 0..inner {
            mx = mx.max(x.data()[idx(i)]);
        }
        let mut denom = S::zero();
        for i in 0..inner {
            denom += ((x.data()[idx(i)] - mx) / temp).exp();
        }
        let gv = g.data()[o];
        for i in 0..inner {
            out[idx(i)] = gv * ((x.data()[idx(i)] - mx) / temp).exp() / denom;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::cast(GELU_C);
    let a = S::cast(GELU_A);
    let half = S::cast(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::cast(GELU_C);
    let a = S::cast(GELU_A);
    let half = S::cast(0.5);
    let three = S::cast(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

/// Gradients produced by one backward sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Reads the node value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        self.with_value(|t| t.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    fn binary(
        self,
        rhs: Var<'t, S>,
        f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> Result<Tensor<S>>,
        op: impl FnOnce(usize, usize) -> Op<S>,
    ) -> Result<Var<'t, S>> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        Ok(self.tape.push(value, op(self.id, rhs.id)))
    }

    fn unary(
        self,
        f: impl FnOnce(&Tensor<S>) -> Result<Tensor<S>>,
        op: impl FnOnce(usize) -> Op<S>,
    ) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        Ok(self.tape.push(value, op(self.id)))
    }

    pub fn add(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(rhs, |a, b| a.add(b), Op::Add)
    }

    pub fn sub(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(rhs, |a, b| a.sub(b), Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(rhs, |a, b| a.mul(b), Op::Mul)
    }

    pub fn div(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(rhs, |a, b| a.div(b), Op::Div)
    }

    /// Row-broadcast add of a rank-1 bias.
    pub fn add_row(self, row: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(row, |a, b| a.add_row(b), Op::AddRow)
    }

    pub fn matmul(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(rhs, |a, b| a.matmul(b), Op::Matmul)
    }

    /// `self · rhsᵀ`, recorded as transpose + matmul.
    pub fn matmul_nt(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.matmul(rhs.transpose()?)
    }

    pub fn transpose(self) -> Result<Var<'t, S>> {
        self.unary(|a| a.transpose(), Op::Transpose)
    }

    pub fn scale(self, c: S) -> Result<Var<'t, S>> {
        self.affine(c, S::zero())
    }

    pub fn affine(self, mul: S, add: S) -> Result<Var<'t, S>> {
        self.unary(|a| a.map("affine", |x| x * mul + add), |src| Op::Affine { src, mul })
    }

    /// Multiplies every element by a one-element node (learnable gate).
    pub fn scale_by(self, scalar: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(
            scalar,
            |a, s| a.scale(s.item()?),
            |src, scalar| Op::MulScalarNode { src, scalar },
        )
    }

    pub fn softmax_rows(self) -> Result<Var<'t, S>> {
        self.unary(|a| softmax_rows_masked(a, None), Op::SoftmaxRows)
    }

    /// Softmax with a {0,1} mask; masked keys get exactly zero weight.
    pub fn masked_softmax_rows(self, mask: &Tensor<S>) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            softmax_rows_masked(&nodes[self.id].value, Some(mask))?
        };
        Ok(self.tape.push(value, Op::MaskedSoftmaxRows { logits: self.id }))
    }

    pub fn sum_all(self) -> Result<Var<'t, S>> {
        self.unary(|a| Tensor::from_vec(vec![1], vec![a.sum()]), Op::SumAll)
    }

    pub fn mean_all(self) -> Result<Var<'t, S>> {
        self.unary(|a| Tensor::from_vec(vec![1], vec![a.mean()]), Op::MeanAll)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let shape = shape.to_vec();
        self.unary(|a| a.reshape(&shape), Op::Reshape)
    }

    pub fn narrow(self, dim: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        self.unary(|a| a.narrow(dim, start, len), |src| Op::Narrow { src, dim, start })
    }

    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t, S>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.gather_rows(indices)?
        };
        Ok(self
            .tape
            .push(value, Op::GatherRows { src: self.id, indices: indices.to_vec() }))
    }

    pub fn concat_rows(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| Error::input("concat_rows: empty input"))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let tensors: Vec<&Tensor<S>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor::concat_rows(&tensors)?
        };
        Ok(tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    pub fn gelu(self) -> Result<Var<'t, S>> {
        self.unary(|a| a.map("gelu", gelu::<S>), Op::Gelu)
    }

    pub fn tanh(self) -> Result<Var<'t, S>> {
        self.unary(|a| a.map("tanh", |x| x.tanh()), Op::Tanh)
    }

    pub fn abs(self) -> Result<Var<'t, S>> {
        self.unary(|a| a.map("abs", |x| x.abs()), Op::Abs)
    }

    pub fn square(self) -> Result<Var<'t, S>> {
        self.mul(self)
    }

    /// Log-sum-exp soft maximum over rows (column profile) or over columns
    /// (row profile); the hard counterparts live in `layout::axis_project`.
    pub fn smooth_max(self, temp: S, over_rows: bool) -> Result<Var<'t, S>> {
        self.unary(
            |a| smooth_max_forward(a, temp, over_rows),
            move |src| Op::SmoothMax { src, temp, over_rows },
        )
    }
}

fn smooth_max_forward<S: Scalar>(x: &Tensor<S>, temp: S, over_rows: bool) -> Result<Tensor<S>> {
    if temp <= S::zero() {
        return Err(Error::input("smooth_max: temperature must be positive"));
    }
    let (m, n) = x.dims2()?;
    let (outer, inner) = if over_rows { (n, m) } else { (m, n) };
    let mut out = vec![S::zero(); outer];
    for o in 0..outer {
        let idx = |i: usize| if over_rows { i * n + o } else { o * n + i };
        let mut mx = S::neg_infinity();
        for i in 0..inner {
            mx = mx.max(x.data()[idx(i)]);
        }
        let mut acc = S::zero();
        for i in 0..inner {
            acc += ((x.data()[idx(i)] - mx) / temp).exp();
        }
        out[o] = mx + temp * acc.ln();
    }
    Tensor::from_vec(vec![outer], out)
}

/// Central-difference gradient of a scalar-valued function, the independent
/// oracle for every reverse-mode check in this crate (also used by the CLI
/// gradcheck command).
pub fn finite_difference_gradient<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> Result<S>,
    x: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    if eps <= S::zero() {
        return Err(Error::input("finite differences: eps must be positive"));
    }
    let mut grad = vec![S::zero(); x.numel()];
    let mut probe = x.data().to_vec();
    for i in 0..x.numel() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&Tensor::from_vec(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - eps;
        let minus = f(&Tensor::from_vec(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        grad[i] = (plus - minus) / (S::cast(2.0) * eps);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// `max |a-b| / max(‖a‖∞, ‖b‖∞, floor)` — the relative-error metric used by
/// all gradient checks.
pub fn max_rel_error<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let denom = a.max_abs().as_f64().max(b.max_abs().as_f64()).max(1e-12);
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        worst = worst.max((x.as_f64() - y.as_f64()).abs());
    }
    worst / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T = Tensor<f64>;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(T::from_vec(vec![4], vec![1., -2., 3., 0.5]).unwrap());
        let loss = x.sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_twice_errors() {
        let tape = Tape::new();
        let x = tape.param(T::scalar(2.0).unwrap());
        let loss = x.square().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardAlreadyRun)));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_scalar_loss_errors() {
        let tape = Tape::new();
        let x = tape.param(T::from_vec(vec![2], vec![1., 2.]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(T::scalar(2.0).unwrap());
        let y = tape.param(T::from_vec(vec![3], vec![1., 2., 3.]).unwrap());
        let loss = x.square().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn softmax_mask_product_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = T::randn(&mut rng, &[3, 5]);
        let m = T::rand_uniform(&mut rng, &[3, 5], 0.0, 1.0);

        let f = |x: &T| -> crate::error::Result<f64> {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let mv = tape.constant(m.clone());
            xv.softmax_rows()?.mul(mv)?.sum_all()?.to_tensor().item()
        };
        let fd = finite_difference_gradient(f, &x0, 1e-5).unwrap();

        let tape = Tape::new();
        let xv = tape.param(x0.clone());
        let mv = tape.constant(m.clone());
        let loss = xv.softmax_rows().unwrap().mul(mv).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = grads.wrt(xv).unwrap();
        assert!(max_rel_error(ad, &fd) < 1e-6, "rel err {}", max_rel_error(ad, &fd));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // Touches matmul, gelu, tanh, abs, add_row, narrow, gather, concat,
        // smooth_max, scale_by and div in one scalar composition.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = T::randn(&mut rng, &[4, 4]);
        let w = T::randn(&mut rng, &[4, 4]);
        let b = T::randn(&mut rng, &[4]);
        let gate = T::scalar(0.3).unwrap();

        let run = |x: &T| -> crate::error::Result<f64> {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let gv = tape.constant(gate.clone());
            let h = xv.matmul(wv)?.add_row(bv)?.gelu()?;
            let cat = Var::concat_rows(&[h, xv])?;
            let top = cat.narrow(0, 0, 4)?.gather_rows(&[0, 2, 2, 3])?;
            let smax = top.smooth_max(0.05, true)?.reshape(&[1, 4])?;
            let gated = smax.tanh()?.abs()?.scale_by(gv.reshape(&[1])?)?;
            let denom = xv.square()?.sum_all()?.affine(1.0, 1.0)?;
            gated.sum_all()?.div(denom)?.to_tensor().item()
        };
        let fd = finite_difference_gradient(run, &x0, 1e-5).unwrap();

        let tape = Tape::new();
        let xv = tape.param(x0.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let gv = tape.constant(gate.clone());
        let h = xv.matmul(wv).unwrap().add_row(bv).unwrap().gelu().unwrap();
        let cat = Var::concat_rows(&[h, xv]).unwrap();
        let top = cat.narrow(0, 0, 4).unwrap().gather_rows(&[0, 2, 2, 3]).unwrap();
        let smax = top.smooth_max(0.05, true).unwrap().reshape(&[1, 4]).unwrap();
        let gated = smax.tanh().unwrap().abs().unwrap().scale_by(gv.reshape(&[1]).unwrap()).unwrap();
        let denom = xv.square().unwrap().sum_all().unwrap().affine(1.0, 1.0).unwrap();
        let loss = gated.sum_all().unwrap().div(denom).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = grads.wrt(xv).unwrap();
        assert!(max_rel_error(ad, &fd) < 1e-6, "rel err {}", max_rel_error(ad, &fd));
    }

    #[test]
    fn finite_difference_oracle_basics() {
        // f = x^2 at 3 -> 6.
        let x = T::scalar(3.0).unwrap();
        let g = finite_difference_gradient(
            |t| Ok(t.item().unwrap() * t.item().unwrap()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.item().unwrap() - 6.0).abs() < 1e-6);

        // Constant function -> zero gradient.
        let g = finite_difference_gradient(|_| Ok(4.5), &x, 1e-5).unwrap();
        assert_eq!(g.item().unwrap(), 0.0);

        // Sum of squares on a random 8-vector -> 2x.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = T::randn(&mut rng, &[8]);
        let g = finite_difference_gradient(
            |t| Ok(t.data().iter().map(|&x| x * x).sum()),
            &v,
            1e-5,
        )
        .unwrap();
        let expect = v.scale(2.0).unwrap();
        assert!(max_rel_error(&g, &expect) < 1e-6);
    }
}
