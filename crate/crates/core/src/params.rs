//! Parameter containers shared by the layers.
//!
//! Every container is generic over its leaf type so the same struct holds
//! plain [`Tensor`]s at rest and tape [`Var`]s during a forward pass.
//! [`ParamTree`] gives a fixed traversal order, which is what lets
//! [`flatten`] and [`rebind`] line up with each other for gradient checks
//! and gradient descent.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub trait ParamTree<T> {
    type Mapped<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U>;

    fn visit(&self, f: &mut dyn FnMut(&T));
}

/// Records every tensor as a gradient-receiving leaf.
pub fn bind<'t, P: ParamTree<Tensor>>(params: &P, tape: &'t Tape) -> P::Mapped<Var<'t>> {
    params.map_params(&mut |t| tape.param(t.clone()))
}

/// Records every tensor as a constant.
pub fn bind_const<'t, P: ParamTree<Tensor>>(params: &P, tape: &'t Tape) -> P::Mapped<Var<'t>> {
    params.map_params(&mut |t| tape.constant(t.clone()))
}

pub fn flatten<P: ParamTree<Tensor>>(params: &P) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.visit(&mut |t| out.push(t.clone()));
    out
}

/// Rebuilds the structure of `shape` from vars in [`flatten`] order.
pub fn rebind<'t, P: ParamTree<Tensor>>(shape: &P, vars: &[Var<'t>]) -> P::Mapped<Var<'t>> {
    let mut it = vars.iter().copied();
    shape.map_params(&mut |_| it.next().expect("rebind: too few vars"))
}

/// Rebuilds the structure of `shape` from tensors in [`flatten`] order.
pub fn unflatten<P: ParamTree<Tensor>>(shape: &P, tensors: &[Tensor]) -> P::Mapped<Tensor> {
    let mut it = tensors.iter();
    shape.map_params(&mut |_| it.next().expect("unflatten: too few tensors").clone())
}

pub fn count<P: ParamTree<Tensor>>(params: &P) -> usize {
    let mut n = 0;
    params.visit(&mut |t| n += t.numel());
    n
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U> {
        self.iter().map(|p| p.map_params(f)).collect()
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        self.iter().for_each(|p| p.visit(f));
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -a, a, rng)
}

/// Fully connected layer `x·W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: Option<T>,
}

impl Linear<Tensor> {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: init_uniform(&[fan_in, fan_out], fan_in, rng),
            bias: bias.then(|| init_uniform(&[fan_out], fan_in, rng)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros([fan_in, fan_out]),
            bias: bias.then(|| Tensor::zeros([fan_out])),
        }
    }
}

impl<'t> Linear<Var<'t>> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(self.weight)?;
        match self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

impl<T> ParamTree<T> for Linear<T> {
    type Mapped<U> = Linear<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(|b| f(b)),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
}

/// Batch-norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: T,
    pub beta: T,
}

impl BatchNorm<Tensor> {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::full([d], 1.0),
            beta: Tensor::zeros([d]),
        }
    }
}

impl<'t> BatchNorm<Var<'t>> {
    pub fn forward(&self, x: Var<'t>, eps: f64) -> Result<Var<'t>> {
        x.batch_norm(self.gamma, self.beta, eps)
    }
}

impl<T> ParamTree<T> for BatchNorm<T> {
    type Mapped<U> = BatchNorm<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> BatchNorm<U> {
        BatchNorm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&T)) {
        f(&self.gamma);
        f(&self.beta);
    }
}
