use super::ops::{self, BinaryOp};
use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Execution backend for model and loss code.
///
/// Implemented by [`Eager`] (plain evaluation, nothing recorded) and by
/// [`Tape`] (records every op for [`Tape::backward`]).
pub trait Graph<T: Scalar> {
    type Node: Clone;

    /// Insert a value that never receives a gradient.
    fn constant(&mut self, value: Tensor<T>) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        x: &Self::Node,
        k: &Self::Node,
        b: &Self::Node,
        stride: usize,
        pad: usize,
    ) -> Result<Self::Node>;
    fn relu(&mut self, x: &Self::Node) -> Self::Node;
    fn maxpool2(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn upsample2x(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn channel_concat(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn softmax_channels(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn binary(&mut self, op: BinaryOp, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn log_clamped(&mut self, x: &Self::Node, floor: T) -> Self::Node;
    fn sum_channels(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn channel_sums(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn reduce_sum(&mut self, x: &Self::Node) -> Self::Node;
    fn reduce_mean(&mut self, x: &Self::Node) -> Self::Node;
    fn scale(&mut self, x: &Self::Node, c: T) -> Self::Node;
    fn add_scalar(&mut self, x: &Self::Node, c: T) -> Self::Node;

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.binary(BinaryOp::Add, a, b)
    }
    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.binary(BinaryOp::Sub, a, b)
    }
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.binary(BinaryOp::Mul, a, b)
    }
    fn div(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Scalar value of a one-element node.
    fn scalar_value(&self, node: &Self::Node) -> T {
        self.value(node).data()[0]
    }
}

/// Eager evaluation with no recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Graph<T> for Eager {
    type Node = Tensor<T>;

    fn constant(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }
    fn value<'a>(&'a self, node: &'a Tensor<T>) -> &'a Tensor<T> {
        node
    }
    fn conv2d(
        &mut self,
        x: &Tensor<T>,
        k: &Tensor<T>,
        b: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        ops::conv2d(x, k, b, stride, pad)
    }
    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::relu(x)
    }
    fn maxpool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::maxpool2(x)
    }
    fn upsample2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::upsample2x(x)
    }
    fn channel_concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::channel_concat(a, b)
    }
    fn softmax_channels(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax_channels(x)
    }
    fn binary(&mut self, op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::binary(op, a, b)
    }
    fn log_clamped(&mut self, x: &Tensor<T>, floor: T) -> Tensor<T> {
        ops::log_clamped(x, floor)
    }
    fn sum_channels(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::sum_channels(x)
    }
    fn channel_sums(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::channel_sums(x)
    }
    fn reduce_sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::reduce_sum(x)
    }
    fn reduce_mean(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::reduce_mean(x)
    }
    fn scale(&mut self, x: &Tensor<T>, c: T) -> Tensor<T> {
        ops::scale(x, c)
    }
    fn add_scalar(&mut self, x: &Tensor<T>, c: T) -> Tensor<T> {
        ops::add_scalar(x, c)
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Node = Var;

    fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }
    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor<T> {
        Tape::value(self, *node)
    }
    fn conv2d(&mut self, x: &Var, k: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        Tape::conv2d(self, *x, *k, *b, stride, pad)
    }
    fn relu(&mut self, x: &Var) -> Var {
        Tape::relu(self, *x)
    }
    fn maxpool2(&mut self, x: &Var) -> Result<Var> {
        Tape::maxpool2(self, *x)
    }
    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        Tape::upsample2x(self, *x)
    }
    fn channel_concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::channel_concat(self, *a, *b)
    }
    fn softmax_channels(&mut self, x: &Var) -> Result<Var> {
        Tape::softmax_channels(self, *x)
    }
    fn binary(&mut self, op: BinaryOp, a: &Var, b: &Var) -> Result<Var> {
        Tape::binary(self, op, *a, *b)
    }
    fn log_clamped(&mut self, x: &Var, floor: T) -> Var {
        Tape::log_clamped(self, *x, floor)
    }
    fn sum_channels(&mut self, x: &Var) -> Result<Var> {
        Tape::sum_channels(self, *x)
    }
    fn channel_sums(&mut self, x: &Var) -> Result<Var> {
        Tape::channel_sums(self, *x)
    }
    fn reduce_sum(&mut self, x: &Var) -> Var {
        Tape::reduce_sum(self, *x)
    }
    fn reduce_mean(&mut self, x: &Var) -> Var {
        Tape::reduce_mean(self, *x)
    }
    fn scale(&mut self, x: &Var, c: T) -> Var {
        Tape::scale(self, *x, c)
    }
    fn add_scalar(&mut self, x: &Var, c: T) -> Var {
        Tape::add_scalar(self, *x, c)
    }
}
