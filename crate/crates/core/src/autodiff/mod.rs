//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and the handles of its inputs. [`Tape::backward`] walks
//! the nodes in exact reverse order of recording and applies each
//! operation's local gradient rule. Nodes that no path from the loss reaches
//! never receive a gradient, and parameters behind them report an exact zero.
//!
//! A tape and its values belong to one worker; independent batches get
//! independent tapes.

mod kernels;
mod ops;

use std::collections::HashMap;
use std::sync::Arc;

pub use kernels::{gelu, sigmoid};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use ops::{Op, Unary};

/// Handle of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity of a trainable parameter: the owning group's tag plus the
/// parameter's position within that group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub group: u64,
    pub index: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = ops::forward(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_leaf(value, op, requires_grad))
    }

    /// Input tensor; `requires_grad` lets tests differentiate with respect
    /// to inputs directly.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, key: ParamKey, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, Op::Param(key), requires_grad)
    }

    /// `a[.., k] · b[k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Matmul { a, b })
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with
    /// `b[B, n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.push(Op::Bmm { a, b, trans_b })
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of
    /// `a`, broadcast over every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add { a, b })
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.push(Op::Scale { x, c })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Unary { x, f: Unary::Tanh })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Unary {
            x,
            f: Unary::Sigmoid,
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Unary { x, f: Unary::Relu })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Unary { x, f: Unary::Gelu })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax {
            x,
            axis,
            mask: None,
        })
    }

    /// Softmax restricted to positions where `mask` is true; excluded
    /// positions get exactly zero weight. `mask` has one entry per element.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Arc<[bool]>) -> Result<Var> {
        self.push(Op::Softmax {
            x,
            axis,
            mask: Some(mask),
        })
    }

    /// Normalizes each row over the last axis (population variance), then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    /// Row lookup `table[ids[i]]`, shaped `[lead.., d]`.
    pub fn gather(&mut self, table: Var, ids: Arc<[usize]>, lead: Vec<usize>) -> Result<Var> {
        self.push(Op::Gather { table, ids, lead })
    }

    /// Selects entries along the first axis, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: Arc<[usize]>) -> Result<Var> {
        self.push(Op::SelectRows { x, rows })
    }

    /// Inverse of [`Tape::select_rows`]: places row `i` of `x` at
    /// `rows[i]` of an otherwise zero tensor with `n` rows.
    pub fn scatter_rows(&mut self, x: Var, rows: Arc<[usize]>, n: usize) -> Result<Var> {
        self.push(Op::ScatterRows { x, rows, n })
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceLast { x, start, len })
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::ConcatLast { xs: xs.to_vec() })
    }

    /// Concatenates `[B, S1, D]` and `[B, S2, D]` into `[B, S1 + S2, D]`.
    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatAxis1 { a, b })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape { x, shape })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean { x })
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumLast { x })
    }

    /// Per-element binary cross-entropy with predictions clamped into
    /// `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, labels: Arc<[T]>, eps: T) -> Result<Var> {
        self.push(Op::Bce { pred, labels, eps })
    }

    /// Mean binary cross-entropy over a batch. Labels must be 0 or 1.
    pub fn bce_loss(&mut self, pred: Var, labels: &[T]) -> Result<Var> {
        validate_labels(labels)?;
        let per = self.bce(pred, labels.into(), T::of(BCE_EPS))?;
        self.mean(per)
    }

    /// Recomputes every derived node from its recorded inputs and checks the
    /// result is bit-identical to the stored value.
    pub fn replay_check(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let again = ops::forward(&node.op, |v| &self.nodes[v.0].value)?;
            if !again.bit_eq(&node.value) {
                return Err(Error::Audit(format!(
                    "replay of node {i} ({}) diverged from the recorded value",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = ops::backward(
                &node.op,
                |v| &self.nodes[v.0].value,
                |v| self.nodes[v.0].requires_grad,
                &node.value,
                &g,
            )?;
            for (input, contribution) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => kernels::add_into(acc.data_mut(), contribution.data()),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }

        let mut params: HashMap<ParamKey, Tensor<T>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(key) = node.op {
                if let Some(g) = &grads[i] {
                    match params.get_mut(&key) {
                        Some(acc) => kernels::add_into(acc.data_mut(), g.data()),
                        None => {
                            params.insert(key, g.clone());
                        }
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

pub(crate) const BCE_EPS: f64 = 1e-7;

pub(crate) fn validate_labels<T: Scalar>(labels: &[T]) -> Result<()> {
    if let Some(bad) = labels
        .iter()
        .find(|&&y| y != T::zero() && y != T::one())
    {
        return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; `None` if no path from the loss
    /// reaches it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params.get(&key)
    }

    /// Gradient for a parameter, exact zeros when it was unreachable.
    pub fn param_or_zeros(&self, key: ParamKey, shape: &[usize]) -> Tensor<T> {
        self.params
            .get(&key)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}
