//! Differentiable operations for the fixed layer vocabulary the two
//! network architectures need: valid 2-D convolution, 2x2 max pooling,
//! batch normalization, dense layers, inverted dropout, rectifier,
//! flatten and softmax, plus the cross-entropy loss and first-order
//! optimizers.
//!
//! Layers own their parameters and, after a training-mode forward pass,
//! whatever cache their backward pass needs. A model in eval mode never
//! mutates, so `forward_eval` takes `&self` and a frozen model can be
//! shared freely across threads.

mod activation;
mod batch_norm;
mod conv;
mod dense;
mod dropout;
mod optim;
mod pool;
mod softmax;

pub use activation::{Flatten, Relu};
pub use batch_norm::BatchNorm;
pub use conv::Conv2d;
pub use dense::Dense;
pub use dropout::Dropout;
pub use optim::{MomentSlot, Optimizer, OptimizerKind};
pub use pool::MaxPool2;
pub use softmax::{cross_entropy, softmax_vec, Softmax, LOSS_FLOOR};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// Whether a forward pass updates training-time state (caches, batch-norm
/// running statistics, dropout masks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One layer of the fixed vocabulary.
#[derive(Debug, Clone)]
pub enum Layer<F: Scalar> {
    Conv2d(Conv2d<F>),
    MaxPool2(MaxPool2<F>),
    BatchNorm(BatchNorm<F>),
    Dense(Dense<F>),
    Dropout(Dropout<F>),
    Relu(Relu<F>),
    Flatten(Flatten),
    Softmax(Softmax<F>),
}

impl<F: Scalar> Layer<F> {
    /// Training-mode forward pass; caches whatever backward needs.
    pub fn forward_train(&mut self, input: &Tensor<F>, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        match self {
            Layer::Conv2d(l) => l.forward_train(input),
            Layer::MaxPool2(l) => l.forward_train(input),
            Layer::BatchNorm(l) => l.forward_train(input),
            Layer::Dense(l) => l.forward_train(input),
            Layer::Dropout(l) => l.forward_train(input, rng),
            Layer::Relu(l) => l.forward_train(input),
            Layer::Flatten(l) => l.forward_train(input),
            Layer::Softmax(l) => l.forward_train(input),
        }
    }

    /// Eval-mode forward pass: a pure function of parameters and input.
    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Layer::Conv2d(l) => l.forward_eval(input),
            Layer::MaxPool2(l) => l.forward_eval(input),
            Layer::BatchNorm(l) => l.forward_eval(input),
            Layer::Dense(l) => l.forward_eval(input),
            Layer::Dropout(l) => l.forward_eval(input),
            Layer::Relu(l) => l.forward_eval(input),
            Layer::Flatten(l) => l.forward_eval(input),
            Layer::Softmax(l) => l.forward_eval(input),
        }
    }

    /// Consumes the cache of the last training forward pass, accumulates
    /// parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, output_grad: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Layer::Conv2d(l) => l.backward(output_grad),
            Layer::MaxPool2(l) => l.backward(output_grad),
            Layer::BatchNorm(l) => l.backward(output_grad),
            Layer::Dense(l) => l.backward(output_grad),
            Layer::Dropout(l) => l.backward(output_grad),
            Layer::Relu(l) => l.backward(output_grad),
            Layer::Flatten(l) => l.backward(output_grad),
            Layer::Softmax(l) => l.backward(output_grad),
        }
    }

    /// Trainable parameters with their conventional names.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<F>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Dense(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            _ => Vec::new(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::Dense(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state that still belongs in a checkpoint
    /// (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(&'static str, &Tensor<F>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2(_) => "max_pool",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Dense(_) => "dense",
            Layer::Dropout(_) => "dropout",
            Layer::Relu(_) => "activation",
            Layer::Flatten(_) => "flatten",
            Layer::Softmax(_) => "softmax",
        }
    }

    /// Drops any cached training state.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.cache = None,
            Layer::MaxPool2(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Dense(l) => l.cache = None,
            Layer::Dropout(l) => l.cache = None,
            Layer::Relu(l) => l.cache = None,
            Layer::Flatten(l) => l.cache = None,
            Layer::Softmax(l) => l.cache = None,
        }
    }
}
