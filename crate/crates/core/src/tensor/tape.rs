use super::ops::{self, BinaryOp, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool2(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    Softmax(Var),
    Binary(BinaryOp, Var, Var),
    LogClamped(Var, T),
    SumChannels(Var),
    ChannelSums(Var),
    ReduceSum(Var),
    ReduceMean(Var),
    Scale(Var, T),
    AddScalar(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of differentiable operations, replayed in reverse by
/// [`Tape::backward`].
///
/// Values are never mutated once recorded. Gradients are kept for every node
/// that (transitively) depends on a leaf created with `requires_grad`.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop recorded gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Drop everything.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads = None;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let geom = ConvGeom::new(xv.shape(), kv.shape(), bv.shape(), stride, pad)?;
        let out = ops::conv2d(xv, kv, bv, stride, pad)?;
        let rg = self.any_grad(&[x, k, b]);
        Ok(self.push(out, Op::Conv2d { x, k, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let out = ops::maxpool2(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool2(x), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::channel_concat(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out = ops::binary(op, self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn log_clamped(&mut self, x: Var, floor: T) -> Var {
        let out = ops::log_clamped(self.value(x), floor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LogClamped(x, floor), rg)
    }

    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let out = ops::sum_channels(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SumChannels(x), rg))
    }

    pub fn channel_sums(&mut self, x: Var) -> Result<Var> {
        let out = ops::channel_sums(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::ChannelSums(x), rg))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let out = ops::reduce_sum(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::ReduceSum(x), rg)
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let out = ops::reduce_mean(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::ReduceMean(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = ops::scale(self.value(x), c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = ops::add_scalar(self.value(x), c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate when a value feeds several operations. A second
    /// call without [`Tape::reset_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let contribs = self.vjp(&node.op, &node.value, &dy);
            grads[i] = Some(dy);
            for (v, g) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn vjp(&self, op: &Op<T>, out: &Tensor<T>, dy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, k, b, geom } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let (dx, dk, db) = ops::conv2d_backward(val(x), val(k), geom, dy, need_dx);
                let mut res = vec![(*k, dk), (*b, db)];
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                res
            }
            Op::Relu(x) => vec![(*x, ops::relu_backward(val(x), dy))],
            Op::MaxPool2(x) => vec![(*x, ops::maxpool2_backward(val(x), dy))],
            Op::Upsample2x(x) => vec![(*x, ops::upsample2x_backward(val(x).shape(), dy))],
            Op::Concat(a, b) => {
                let (da, db) = ops::channel_concat_backward(val(a).shape(), val(b).shape(), dy);
                vec![(*a, da), (*b, db)]
            }
            Op::Softmax(x) => vec![(*x, ops::softmax_channels_backward(out, dy))],
            Op::Binary(bop, a, b) => {
                let (da, db) = ops::binary_backward(*bop, val(a), val(b), dy);
                vec![(*a, da), (*b, db)]
            }
            Op::LogClamped(x, floor) => {
                vec![(*x, ops::log_clamped_backward(val(x), *floor, dy))]
            }
            Op::SumChannels(x) => vec![(*x, ops::sum_channels_backward(val(x).shape(), dy))],
            Op::ChannelSums(x) => vec![(*x, ops::channel_sums_backward(val(x).shape(), dy))],
            Op::ReduceSum(x) => {
                let g = dy.data()[0];
                vec![(*x, Tensor::full(val(x).shape(), g))]
            }
            Op::ReduceMean(x) => {
                let xv = val(x);
                let g = dy.data()[0] / T::of(xv.len() as f64);
                vec![(*x, Tensor::full(xv.shape(), g))]
            }
            Op::Scale(x, c) => vec![(*x, ops::scale(dy, *c))],
            Op::AddScalar(x) => vec![(*x, dy.clone())],
        }
    }
}
