//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output and whatever it needs for
//! the backward pass. Nodes only reference earlier nodes, so walking the
//! tape backwards from the loss visits each node once, after all of its
//! consumers.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use kernels::GateMode;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(String),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    Sigmoid(Var),
    BroadcastMul {
        input: Var,
        gate: Var,
        mode: GateMode,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Scale(Var, T),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    SegLoss {
        logits: Var,
        target: Tensor<T>,
        mix: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value, &[])
    }

    /// Records a snapshot of a named parameter. `backward` accumulates the
    /// gradient for this use into the store under the same name.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), value, &[]))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            out,
            &[input, weight, bias],
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            out,
            &[input, weight, bias],
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        Ok(self.push(Op::GlobalAvgPool(input), out, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu(self.value(input));
        self.push(Op::Relu(input), out, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = kernels::sigmoid(self.value(input));
        self.push(Op::Sigmoid(input), out, &[input])
    }

    pub fn broadcast_mul(&mut self, input: Var, gate: Var) -> Result<Var> {
        let mode = kernels::gate_mode(self.value(input).shape(), self.value(gate).shape())?;
        let out = kernels::broadcast_mul(self.value(input), self.value(gate))?;
        Ok(self.push(Op::BroadcastMul { input, gate, mode }, out, &[input, gate]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// Sum of all elements, as a `[1, 1, 1, 1]` scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(Op::Sum(input), out, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        self.push(Op::Scale(input, factor), out, &[input])
    }

    pub fn max_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool_2x2_with_argmax(self.value(input))?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, out, &[input]))
    }

    pub fn upsample_nearest_2x(&mut self, input: Var) -> Var {
        let out = kernels::upsample_nearest_2x(self.value(input));
        self.push(Op::Upsample2(input), out, &[input])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), out, &[a, b]))
    }

    /// Mixed soft-dice / BCE loss of `logits` against a binary target.
    pub fn seg_loss(&mut self, logits: Var, target: &Tensor<T>, mix: T) -> Result<Var> {
        let value = kernels::seg_loss(self.value(logits), target, mix)?;
        Ok(self.push(
            Op::SegLoss {
                logits,
                target: target.clone(),
                mix,
            },
            Tensor::scalar(value),
            &[logits],
        ))
    }

    /// Propagates d(loss)/d(node) back through the tape and adds the
    /// parameter gradients into `store`. Parameters used more than once
    /// receive the sum of their contributions.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let loss_shape = self.value(loss).shape();
        if loss_shape != [1, 1, 1, 1] {
            return Err(Error::InvalidShape {
                op: "backward",
                reason: format!("loss must be a [1, 1, 1, 1] scalar, got {loss_shape:?}"),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for index in (0..=loss.0).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[index].take() else {
                continue;
            };
            self.backward_node(node, grad, &mut grads, store)?;
        }
        Ok(())
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        grad: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let mut send = |var: Var, g: Tensor<T>| -> Result<()> {
            if !self.nodes[var.0].requires_grad {
                return Ok(());
            }
            match grads[var.0].as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => grads[var.0] = Some(g),
            }
            Ok(())
        };
        match &node.op {
            Op::Input => {}
            Op::Param(name) => store.accumulate_grad(name, &grad)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let g = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    &grad,
                    *stride,
                    *padding,
                    self.wants(*input),
                )?;
                if let Some(d_input) = g.input {
                    send(*input, d_input)?;
                }
                send(*weight, g.weight)?;
                send(*bias, g.bias)?;
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let g = kernels::linear_backward(self.value(*input), self.value(*weight), &grad)?;
                send(*input, g.input)?;
                send(*weight, g.weight)?;
                send(*bias, g.bias)?;
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape();
                send(*input, kernels::global_avg_pool_backward(shape, &grad))?;
            }
            Op::Relu(input) => {
                send(*input, kernels::relu_backward(self.value(*input), &grad))?;
            }
            Op::Sigmoid(input) => {
                send(*input, kernels::sigmoid_backward(&node.value, &grad))?;
            }
            Op::BroadcastMul { input, gate, mode } => {
                let (d_input, d_gate) = kernels::broadcast_mul_backward(
                    self.value(*input),
                    self.value(*gate),
                    &grad,
                    *mode,
                );
                send(*input, d_input)?;
                send(*gate, d_gate)?;
            }
            Op::Add(a, b) => {
                send(*a, grad.clone())?;
                send(*b, grad)?;
            }
            Op::Mul(a, b) => {
                send(*a, kernels::mul(&grad, self.value(*b))?)?;
                send(*b, kernels::mul(&grad, self.value(*a))?)?;
            }
            Op::Sum(input) => {
                let g = grad.data()[0];
                send(*input, Tensor::full(self.value(*input).shape(), g))?;
            }
            Op::Scale(input, factor) => {
                let f = *factor;
                send(*input, grad.map(|v| v * f))?;
            }
            Op::MaxPool2 { input, argmax } => {
                let shape = self.value(*input).shape();
                send(*input, kernels::max_pool_2x2_backward(shape, argmax, &grad))?;
            }
            Op::Upsample2(input) => {
                send(*input, kernels::upsample_nearest_2x_backward(&grad))?;
            }
            Op::Concat(a, b) => {
                let split = self.value(*a).shape()[1];
                let total = grad.shape()[1];
                send(*a, grad.slice_channels(0, split)?)?;
                send(*b, grad.slice_channels(split, total)?)?;
            }
            Op::SegLoss {
                logits,
                target,
                mix,
            } => {
                let scale = grad.data()[0];
                let d = kernels::seg_loss_backward(self.value(*logits), target, *mix);
                send(*logits, d.map(|v| v * scale))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_weighted_sum_is_the_fixed_input() {
        let mut store = ParamStore::<f64>::new();
        let x = Tensor::new([1, 1, 1, 3], vec![1.5, -2.0, 0.25]).unwrap();
        store.insert("w", Tensor::full([1, 1, 1, 3], 0.3)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let xv = tape.input(x.clone());
        let prod = tape.mul(w, xv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap(), &x);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_a_quarter() {
        let k = 3.0;
        let mut store = ParamStore::<f64>::new();
        store.insert("t", Tensor::zeros([1, 1, 1, 1])).unwrap();
        let mut tape = Tape::new();
        let t = tape.param(&store, "t").unwrap();
        let s = tape.sigmoid(t);
        let loss = tape.scale(s, k);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("t").unwrap().data(), &[0.25 * k]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("used", Tensor::full([1, 1, 2, 2], 2.0)).unwrap();
        store.insert("unused", Tensor::full([1, 1, 2, 2], 2.0)).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, "used").unwrap();
        let _ = tape.param(&store, "unused").unwrap();
        let loss = tape.sum(u);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad("unused").unwrap().data().iter().all(|&g| g == 0.0));
        assert!(store.grad("used").unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full([1, 1, 1, 1], 3.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "w").unwrap();
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::zeros([1, 1, 2, 2])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let y = tape.relu(w);
        assert!(tape.backward(y, &mut store).is_err());
    }
}
