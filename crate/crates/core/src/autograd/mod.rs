//! Reverse-mode differentiation over the tensor primitives.
//!
//! A [`Tape`] records every operation together with its output value. The
//! tape is append-only, so node ids are already a topological order and
//! [`Tape::backward`] is a single reverse sweep. Backward does not mutate the
//! tape; calling it twice gives bitwise-identical gradients.

mod gradcheck;

pub use gradcheck::{central_difference, grad_check, rel_err, GradCheckReport, ParamCheck};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// A value recorded from outside the tape; it has no backward rule.
    Opaque(&'static str),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax { input: Var, axis: usize },
    PoolRows(Var),
    PoolCols(Var),
    Linear { x: Var, w: Var, b: Var },
    StackH(Var),
    StackW(Var),
    UnstackH(Var),
    UnstackW(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Repeat(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { input: Var, factor: f64 },
    Residual { x: Var, ctx: Var, gamma: Var },
    Sum(Var),
    SumSquares(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Opaque(name) => name,
            Op::MatMul(..) => "matmul_batched",
            Op::Transpose(_) => "transpose_last2",
            Op::Softmax { .. } => "softmax",
            Op::PoolRows(_) => "avg_pool_rows",
            Op::PoolCols(_) => "avg_pool_cols",
            Op::Linear { .. } => "linear_channels",
            Op::StackH(_) => "slice_stack_h",
            Op::StackW(_) => "slice_stack_w",
            Op::UnstackH(_) => "unstack_h",
            Op::UnstackW(_) => "unstack_w",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Repeat(_) => "repeat_leading",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::Residual { .. } => "residual_add",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or data).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Records an externally computed value. Backward through it fails.
    pub fn opaque(&mut self, name: &'static str, value: Tensor) -> Var {
        self.push(Op::Opaque(name), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_batched(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = tensor::transpose_last2(self.value(x))?;
        Ok(self.push(Op::Transpose(x), out))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax { input: x, axis }, out))
    }

    pub fn avg_pool_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::avg_pool_rows(self.value(x))?;
        Ok(self.push(Op::PoolRows(x), out))
    }

    pub fn avg_pool_cols(&mut self, x: Var) -> Result<Var> {
        let out = tensor::avg_pool_cols(self.value(x))?;
        Ok(self.push(Op::PoolCols(x), out))
    }

    pub fn linear_channels(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = tensor::linear_channels(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, out))
    }

    pub fn slice_stack_h(&mut self, x: Var) -> Result<Var> {
        let out = tensor::slice_stack_h(self.value(x))?;
        Ok(self.push(Op::StackH(x), out))
    }

    pub fn slice_stack_w(&mut self, x: Var) -> Result<Var> {
        let out = tensor::slice_stack_w(self.value(x))?;
        Ok(self.push(Op::StackW(x), out))
    }

    pub fn unstack_h(&mut self, x: Var) -> Result<Var> {
        let out = tensor::unstack_h(self.value(x))?;
        Ok(self.push(Op::UnstackH(x), out))
    }

    pub fn unstack_w(&mut self, x: Var) -> Result<Var> {
        let out = tensor::unstack_w(self.value(x))?;
        Ok(self.push(Op::UnstackW(x), out))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat(&values, axis)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = tensor::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(Op::Narrow { input: x, axis, start }, out))
    }

    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Result<Var> {
        let out = tensor::repeat_leading(self.value(x), times)?;
        Ok(self.push(Op::Repeat(x), out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = tensor::scale(self.value(x), factor)?;
        Ok(self.push(Op::Scale { input: x, factor }, out))
    }

    /// `x + gamma · ctx` with a one-element `gamma`.
    pub fn residual(&mut self, x: Var, ctx: Var, gamma: Var) -> Result<Var> {
        let g = self.value(gamma).item().ok_or_else(|| {
            Error::dim(
                "residual_add",
                format!("gamma must hold one scalar, got {:?}", self.value(gamma).shape()),
            )
        })?;
        let out = tensor::residual_add(self.value(x), self.value(ctx), g)?;
        Ok(self.push(Op::Residual { x, ctx, gamma }, out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::from_op("sum", vec![1], vec![tensor::sum_all(self.value(x))])?;
        Ok(self.push(Op::Sum(x), out))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::from_op(
            "sum_squares",
            vec![1],
            vec![tensor::sum_squares(self.value(x))],
        )?;
        Ok(self.push(Op::SumSquares(x), out))
    }

    /// Mean squared error between `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.value(pred).len() as f64;
        let diff = self.sub(pred, target)?;
        let ss = self.sum_squares(diff)?;
        self.scale(ss, 1.0 / n)
    }

    /// Gradients of the scalar `loss` with respect to every leaf on the tape.
    /// Leaves that do not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<Var, Tensor>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0)?);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contribution) in self.node_backward(node, &g)? {
                accumulate(&mut grads[input.0], contribution)?;
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = match grads.get_mut(id).and_then(Option::take) {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape())?,
                };
                out.insert(Var(id), g);
            }
        }
        Ok(out)
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let v = |x: Var| self.value(x);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Opaque(name) => return Err(Error::MissingBackward((*name).to_string())),
            Op::MatMul(a, b) => {
                let ga = tensor::matmul_batched(g, &tensor::transpose_last2(v(*b))?)?;
                let gb = tensor::matmul_batched(&tensor::transpose_last2(v(*a))?, g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => vec![(*x, tensor::transpose_last2(g)?)],
            Op::Softmax { input, axis } => {
                vec![(*input, tensor::softmax_backward(&node.value, g, *axis)?)]
            }
            Op::PoolRows(x) => {
                vec![(*x, tensor::avg_pool_rows_backward(g, v(*x).shape()[1])?)]
            }
            Op::PoolCols(x) => {
                vec![(*x, tensor::avg_pool_cols_backward(g, v(*x).shape()[2])?)]
            }
            Op::Linear { x, w, b } => {
                let gx = tensor::linear_channels_grad_input(g, v(*w))?;
                let (gw, gb) = tensor::linear_channels_grad_params(g, v(*x))?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::StackH(x) => vec![(*x, tensor::unstack_h(g)?)],
            Op::StackW(x) => vec![(*x, tensor::unstack_w(g)?)],
            Op::UnstackH(x) => vec![(*x, tensor::slice_stack_h(g)?)],
            Op::UnstackW(x) => vec![(*x, tensor::slice_stack_w(g)?)],
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = v(p).shape()[*axis];
                    out.push((p, tensor::narrow(g, *axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Narrow { input, axis, start } => {
                vec![(*input, pad_narrow_grad(g, v(*input).shape(), *axis, *start)?)]
            }
            Op::Repeat(x) => vec![(*x, tensor::sum_leading(g)?.reshape(v(*x).shape())?)],
            Op::Reshape(x) => vec![(*x, g.reshape(v(*x).shape())?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, tensor::scale(g, -1.0)?)],
            Op::Mul(a, b) => vec![
                (*a, tensor::mul(g, v(*b))?),
                (*b, tensor::mul(g, v(*a))?),
            ],
            Op::Scale { input, factor } => vec![(*input, tensor::scale(g, *factor)?)],
            Op::Residual { x, ctx, gamma } => {
                let gamma_value = v(*gamma).item().expect("checked when recorded");
                let dgamma = tensor::sum_all(&tensor::mul(g, v(*ctx))?);
                vec![
                    (*x, g.clone()),
                    (*ctx, tensor::scale(g, gamma_value)?),
                    (*gamma, Tensor::from_op("residual_add", vec![1], vec![dgamma])?),
                ]
            }
            Op::Sum(x) => {
                let s = scalar_grad(g)?;
                vec![(*x, Tensor::full(v(*x).shape(), s)?)]
            }
            Op::SumSquares(x) => {
                let s = scalar_grad(g)?;
                vec![(*x, tensor::scale(v(*x), 2.0 * s)?)]
            }
        })
    }

    /// Human-readable op names in recording order, for diagnostics.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}

fn scalar_grad(g: &Tensor) -> Result<f64> {
    g.item()
        .ok_or_else(|| Error::Backward("reduction received a non-scalar gradient".into()))
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(existing) => tensor::add(&existing, &contribution)?,
        None => contribution,
    });
    Ok(())
}

/// Scatters a narrowed gradient back into a zero tensor of the input shape.
fn pad_narrow_grad(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Result<Tensor> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let len = g.shape()[axis];
    let mut out = vec![0.0; shape.iter().product()];
    for o in 0..outer {
        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
        let dst = (o * extent + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(src);
    }
    Tensor::from_op("narrow_backward", shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut rng = Rng::new(5);
        let mut tape = Tape::new();
        let x = tape.leaf(rng.uniform_tensor(&[2, 3, 2], -1.0, 1.0).unwrap());
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads[&x].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_of_summed_softmax_is_zero() {
        let mut rng = Rng::new(6);
        let mut tape = Tape::new();
        let x = tape.leaf(rng.uniform_tensor(&[3, 4], -2.0, 2.0).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads[&x].data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 3.0).unwrap());
        let unused = tape.leaf(Tensor::full(&[3, 1], 1.0).unwrap());
        let loss = tape.sum_squares(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[&x].data(), &[6.0, 6.0]);
        assert_eq!(grads[&unused].shape(), &[3, 1]);
        assert!(grads[&unused].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dx (3x + x²) = 3 + 2x
        assert_eq!(grads[&x].data(), &[5.0, -1.0]);
    }

    #[test]
    fn rejects_non_scalar_loss_and_opaque_ops() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
        let o = tape.opaque("external", Tensor::zeros(&[2]).unwrap());
        let y = tape.add(x, o).unwrap();
        let loss = tape.sum(y).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::MissingBackward(n)) if n == "external"));
    }

    #[test]
    fn linear_identity_quadratic_matches_closed_form() {
        // loss = Σ (W x + b)², W = I, b = 0  ⇒  dL/dx = 2x, dL/dW = 2 x xᵀ summed over positions.
        let mut rng = Rng::new(8);
        let xv = rng.uniform_tensor(&[3, 2, 2], -1.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let w = tape.leaf(Tensor::eye(3).unwrap());
        let b = tape.leaf(Tensor::zeros(&[3]).unwrap());
        let y = tape.linear_channels(x, w, b).unwrap();
        let loss = tape.sum_squares(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (g, v) in grads[&x].data().iter().zip(xv.data()) {
            assert_eq!(*g, 2.0 * v);
        }
        for o in 0..3 {
            for k in 0..3 {
                let expected = (0..4).fold(0.0, |a, p| a + 2.0 * xv.data()[o * 4 + p] * xv.data()[k * 4 + p]);
                assert_eq!(grads[&w].at(&[o, k]), expected);
            }
            let expected_b = (0..4).fold(0.0, |a, p| a + 2.0 * xv.data()[o * 4 + p]);
            assert_eq!(grads[&b].data()[o], expected_b);
        }
    }

    #[test]
    fn backward_twice_is_bitwise_identical() {
        let mut rng = Rng::new(10);
        let mut tape = Tape::new();
        let a = tape.leaf(rng.uniform_tensor(&[2, 3, 4], -1.0, 1.0).unwrap());
        let b = tape.leaf(rng.uniform_tensor(&[2, 4, 3], -1.0, 1.0).unwrap());
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax(m, 2).unwrap();
        let loss = tape.sum_squares(s).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for (k, v) in &g1 {
            assert!(v.bit_eq(&g2[k]));
        }
    }
}
