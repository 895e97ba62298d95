//! Layer kinds used by the detector and gaze networks.

mod block;
mod conv;
mod linear;
mod norm;
mod pool;

pub use block::{leaky_max, leaky_max_grad, LeakyMaxBlock, LEAKY_MAX_LAMBDA};
pub use conv::{conv_output_dim, Conv2d};
pub use linear::Linear;
pub use norm::{BatchNorm, Relu, ReluTn, BN_MOMENTUM, NORM_EPS};
pub use pool::MaxPool2;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// How a parameter participates in centralization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Convolution filter bank or fully connected weight matrix; the leading
    /// dimension indexes output filters.
    Filter,
    Bias,
    Scale,
    Shift,
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub role: ParamRole,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, role: ParamRole) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad, role }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Serialized tensor roles inside a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum StateRole {
    Weight = 1,
    Bias = 2,
    Gamma = 3,
    Beta = 4,
    RunningMean = 5,
    RunningVar = 6,
}

impl StateRole {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => Self::Weight,
            2 => Self::Bias,
            3 => Self::Gamma,
            4 => Self::Beta,
            5 => Self::RunningMean,
            6 => Self::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum LayerKind {
    Conv = 1,
    BatchNorm = 2,
    ReluTn = 3,
    Relu = 4,
    MaxPool = 5,
    FullyConnected = 6,
    LeakyMaxBlock = 7,
}

impl LayerKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => Self::Conv,
            2 => Self::BatchNorm,
            3 => Self::ReluTn,
            4 => Self::Relu,
            5 => Self::MaxPool,
            6 => Self::FullyConnected,
            7 => Self::LeakyMaxBlock,
            _ => return None,
        })
    }
}

/// Batch normalization statistics source for a cached forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running statistics; samples are processed independently.
    Eval,
}

#[derive(Clone, Debug)]
pub enum Layer<T: Scalar> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    ReluTn(ReluTn<T>),
    Relu(Relu),
    MaxPool(MaxPool2),
    FullyConnected(Linear<T>),
    LeakyMaxBlock(LeakyMaxBlock<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::ReluTn(_) => LayerKind::ReluTn,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::FullyConnected(_) => LayerKind::FullyConnected,
            Layer::LeakyMaxBlock(_) => LayerKind::LeakyMaxBlock,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(c) => c.output_shape(input),
            Layer::FullyConnected(l) => l.output_shape(input),
            Layer::MaxPool(_) => MaxPool2::output_shape(input),
            Layer::LeakyMaxBlock(b) => b.output_shape(input),
            Layer::BatchNorm(_) | Layer::ReluTn(_) | Layer::Relu(_) => Ok(input.to_vec()),
        }
    }

    /// Forward pass that caches intermediates for [`Layer::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        x.ensure_finite("layer forward")?;
        self.forward_inner(x, mode, true)
    }

    /// Inference-mode forward pass without caching; safe to share across threads.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.ensure_finite("layer forward")?;
        self.infer_inner(x)
    }

    /// Propagates `grad` (gradient of the loss w.r.t. this layer's output)
    /// back to the input, accumulating parameter gradients.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backward_inner(grad, true)?.expect("input gradient requested"))
    }

    pub(crate) fn forward_inner(&mut self, x: &Tensor<T>, mode: Mode, cache: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.forward(x, cache),
            Layer::BatchNorm(b) => b.forward(x, mode == Mode::Train, cache),
            Layer::ReluTn(r) => r.forward(x, cache),
            Layer::Relu(r) => Ok(r.forward(x, cache)),
            Layer::MaxPool(p) => p.forward(x, cache),
            Layer::FullyConnected(l) => l.forward(x, cache),
            Layer::LeakyMaxBlock(b) => b.forward(x, mode, cache),
        }
    }

    pub(crate) fn infer_inner(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.infer(x),
            Layer::BatchNorm(b) => b.infer(x),
            Layer::ReluTn(r) => r.infer(x),
            Layer::Relu(_) => Ok(Relu::infer(x)),
            Layer::MaxPool(_) => MaxPool2::infer(x),
            Layer::FullyConnected(l) => l.infer(x),
            Layer::LeakyMaxBlock(b) => b.infer(x),
        }
    }

    pub(crate) fn backward_inner(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        match self {
            Layer::Conv(c) => c.backward(grad, need_input_grad),
            Layer::BatchNorm(b) => b.backward(grad).map(Some),
            Layer::ReluTn(r) => r.backward(grad).map(Some),
            Layer::Relu(r) => r.backward(grad).map(Some),
            Layer::MaxPool(p) => p.backward(grad).map(Some),
            Layer::FullyConnected(l) => l.backward(grad, need_input_grad),
            Layer::LeakyMaxBlock(b) => b.backward(grad, need_input_grad),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(c) => c.clear_cache(),
            Layer::BatchNorm(b) => b.clear_cache(),
            Layer::ReluTn(r) => r.clear_cache(),
            Layer::Relu(r) => r.clear_cache(),
            Layer::MaxPool(p) => p.clear_cache(),
            Layer::FullyConnected(l) => l.clear_cache(),
            Layer::LeakyMaxBlock(b) => b.clear_cache(),
        }
    }

    /// Discrete choices made by the last cached forward pass (ReLU masks,
    /// pooling winners, leaky-max winners). Two passes with equal signatures
    /// lie on the same smooth piece of the layer function.
    pub fn decision_signature(&self, out: &mut Vec<u8>) {
        match self {
            Layer::ReluTn(r) => r.signature(out),
            Layer::Relu(r) => r.signature(out),
            Layer::MaxPool(p) => p.signature(out),
            Layer::LeakyMaxBlock(b) => b.signature(out),
            Layer::Conv(_) | Layer::BatchNorm(_) | Layer::FullyConnected(_) => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weight);
                f(&mut c.bias);
            }
            Layer::BatchNorm(b) => {
                f(&mut b.gamma);
                f(&mut b.beta);
            }
            Layer::FullyConnected(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Layer::LeakyMaxBlock(b) => {
                for l in &mut b.path {
                    l.visit_params_mut(f);
                }
                if let Some(s) = &mut b.skip {
                    f(&mut s.weight);
                    f(&mut s.bias);
                }
            }
            Layer::ReluTn(_) | Layer::Relu(_) | Layer::MaxPool(_) => {}
        }
    }

    /// Every persistent tensor (parameters and running statistics) in a fixed order.
    pub fn visit_state(&self, f: &mut dyn FnMut(LayerKind, StateRole, &Tensor<T>)) {
        match self {
            Layer::Conv(c) => {
                f(LayerKind::Conv, StateRole::Weight, &c.weight.value);
                f(LayerKind::Conv, StateRole::Bias, &c.bias.value);
            }
            Layer::BatchNorm(b) => {
                f(LayerKind::BatchNorm, StateRole::Gamma, &b.gamma.value);
                f(LayerKind::BatchNorm, StateRole::Beta, &b.beta.value);
                f(LayerKind::BatchNorm, StateRole::RunningMean, &b.running_mean);
                f(LayerKind::BatchNorm, StateRole::RunningVar, &b.running_var);
            }
            Layer::FullyConnected(l) => {
                f(LayerKind::FullyConnected, StateRole::Weight, &l.weight.value);
                f(LayerKind::FullyConnected, StateRole::Bias, &l.bias.value);
            }
            Layer::LeakyMaxBlock(b) => {
                for l in &b.path {
                    l.visit_state(f);
                }
                if let Some(s) = &b.skip {
                    f(LayerKind::Conv, StateRole::Weight, &s.weight.value);
                    f(LayerKind::Conv, StateRole::Bias, &s.bias.value);
                }
            }
            Layer::ReluTn(_) | Layer::Relu(_) | Layer::MaxPool(_) => {}
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(LayerKind, StateRole, &mut Tensor<T>)) {
        match self {
            Layer::Conv(c) => {
                f(LayerKind::Conv, StateRole::Weight, &mut c.weight.value);
                f(LayerKind::Conv, StateRole::Bias, &mut c.bias.value);
            }
            Layer::BatchNorm(b) => {
                f(LayerKind::BatchNorm, StateRole::Gamma, &mut b.gamma.value);
                f(LayerKind::BatchNorm, StateRole::Beta, &mut b.beta.value);
                f(LayerKind::BatchNorm, StateRole::RunningMean, &mut b.running_mean);
                f(LayerKind::BatchNorm, StateRole::RunningVar, &mut b.running_var);
            }
            Layer::FullyConnected(l) => {
                f(LayerKind::FullyConnected, StateRole::Weight, &mut l.weight.value);
                f(LayerKind::FullyConnected, StateRole::Bias, &mut l.bias.value);
            }
            Layer::LeakyMaxBlock(b) => {
                for l in &mut b.path {
                    l.visit_state_mut(f);
                }
                if let Some(s) = &mut b.skip {
                    f(LayerKind::Conv, StateRole::Weight, &mut s.weight.value);
                    f(LayerKind::Conv, StateRole::Bias, &mut s.bias.value);
                }
            }
            Layer::ReluTn(_) | Layer::Relu(_) | Layer::MaxPool(_) => {}
        }
    }
}
