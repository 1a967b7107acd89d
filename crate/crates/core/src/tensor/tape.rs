use std::cell::{Ref, RefCell};

use super::ops::{self, Padding};
use super::Tensor;
use crate::error::{Result, TsmError};

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
        padding: Padding,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    FullyConnected {
        input: usize,
        weights: usize,
        bias: usize,
    },
    MulBroadcast(usize, usize),
    Reshape(usize),
    Sum(usize),
    Select {
        input: usize,
        index: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation trace for reverse-mode differentiation.
///
/// Every operation on a [`Var`] appends a node; node ids are a topological
/// order, so [`Tape::backward`] walks them in reverse. A tape belongs to one
/// thread and is dropped after its backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    ///
    /// Contributions accumulate additively where a value fans out.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TsmError::State("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.requires_grad {
            return Err(TsmError::State(
                "backward called on a tensor with no tracked inputs".into(),
            ));
        }
        if root.value.len() != 1 {
            return Err(TsmError::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0)?);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].as_ref() else { continue };
            let contributions: Vec<(usize, Tensor)> = match &node.op {
                Op::Leaf => continue,
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    padding,
                } => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        &nodes[*input].value,
                        &nodes[*kernels].value,
                        &nodes[*bias].value,
                        *padding,
                        g,
                    )?;
                    vec![(*input, gx), (*kernels, gk), (*bias, gb)]
                }
                Op::MaxPool2d { input, argmax } => {
                    let gx = ops::maxpool2d_backward(nodes[*input].value.shape(), argmax, g)?;
                    vec![(*input, gx)]
                }
                Op::Relu(input) => vec![(*input, ops::relu_backward(&nodes[*input].value, g))],
                Op::Sigmoid(input) => vec![(*input, ops::sigmoid_backward(&node.value, g))],
                Op::FullyConnected { input, weights, bias } => {
                    let (gx, gw, gb) = ops::fully_connected_backward(
                        &nodes[*input].value,
                        &nodes[*weights].value,
                        &nodes[*bias].value,
                        g,
                    )?;
                    vec![(*input, gx), (*weights, gw), (*bias, gb)]
                }
                Op::MulBroadcast(a, b) => {
                    let (ga, gb) = ops::mul_broadcast_backward(&nodes[*a].value, &nodes[*b].value, g)?;
                    vec![(*a, ga), (*b, gb)]
                }
                Op::Reshape(input) => {
                    vec![(*input, g.reshape(nodes[*input].value.shape().to_vec())?)]
                }
                Op::Sum(input) => {
                    let shape = nodes[*input].value.shape().to_vec();
                    vec![(*input, Tensor::full(shape, g.data()[0])?)]
                }
                Op::Select { input, index } => {
                    let mut gx = Tensor::zeros(nodes[*input].value.shape().to_vec())?;
                    gx.data_mut()[*index] = g.data()[0];
                    vec![(*input, gx)]
                }
                Op::SoftmaxCrossEntropy { logits, label, probs } => {
                    let scale = g.data()[0];
                    let data = probs
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| scale * (p - f64::from(u8::from(k == *label))))
                        .collect();
                    vec![(*logits, Tensor::new(vec![probs.len()], data)?)]
                }
            };
            for (parent, contribution) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradient table produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but returns zeros for an untouched variable.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()).expect("recorded shapes are valid"))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TsmError::State("variables recorded on different tapes".into()))
        }
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        let requires_grad = self.tape.tracked(parents);
        self.tape.push(value, op, requires_grad)
    }

    pub fn conv2d(&self, kernels: Var<'t>, bias: Var<'t>, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(&kernels)?;
        self.same_tape(&bias)?;
        let value = ops::conv2d(&self.value(), &kernels.value(), &bias.value(), padding)?;
        Ok(self.record(
            value,
            Op::Conv2d {
                input: self.id,
                kernels: kernels.id,
                bias: bias.id,
                padding,
            },
            &[self.id, kernels.id, bias.id],
        ))
    }

    pub fn maxpool2d(&self, kernel: (usize, usize), stride: (usize, usize), ceil_mode: bool) -> Result<Var<'t>> {
        let pooled = ops::maxpool2d(&self.value(), kernel, stride, ceil_mode)?;
        Ok(self.record(
            pooled.output,
            Op::MaxPool2d {
                input: self.id,
                argmax: pooled.argmax,
            },
            &[self.id],
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let value = ops::relu(&self.value());
        self.record(value, Op::Relu(self.id), &[self.id])
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let value = ops::sigmoid(&self.value());
        self.record(value, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn fully_connected(&self, weights: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weights)?;
        self.same_tape(&bias)?;
        let value = ops::fully_connected(&self.value(), &weights.value(), &bias.value())?;
        Ok(self.record(
            value,
            Op::FullyConnected {
                input: self.id,
                weights: weights.id,
                bias: bias.id,
            },
            &[self.id, weights.id, bias.id],
        ))
    }

    /// Entrywise product with `other` repeated along its unit axes.
    pub fn mul_broadcast(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = ops::mul_broadcast(&self.value(), &other.value())?;
        Ok(self.record(value, Op::MulBroadcast(self.id, other.id), &[self.id, other.id]))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.record(value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn flatten(&self) -> Result<Var<'t>> {
        let n = self.value().len();
        self.reshape(vec![n])
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.record(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    /// One entry (by flat index) as a scalar.
    pub fn select(&self, index: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            *v.data().get(index).ok_or_else(|| TsmError::Index {
                context: "select".into(),
                index,
                size: v.len(),
            })?
        };
        Ok(self.record(Tensor::scalar(value), Op::Select { input: self.id, index }, &[self.id]))
    }

    pub fn softmax_cross_entropy(&self, label: usize) -> Result<Var<'t>> {
        let (loss, probs) = ops::softmax_cross_entropy(&self.value(), label)?;
        Ok(self.record(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                label,
                probs,
            },
            &[self.id],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap());
        let grads = tape.backward(x.sum()).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
        let loss = x.mul_broadcast(x).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn untracked_backward_is_state_error() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(c.sum()), Err(TsmError::State(_))));
    }

    #[test]
    fn non_scalar_backward_is_state_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x.relu()), Err(TsmError::State(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let grads = tape.backward(x.mul_broadcast(c).unwrap().sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let tape = Tape::new();
        let z = tape.param(Tensor::vector(vec![0.0, 0.0]));
        let grads = tape.backward(z.softmax_cross_entropy(1).unwrap()).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[0.5, -0.5]);
    }
}
