//! Dense CPU tensors and the handful of layer kinds needed by the face
//! detector and gaze networks, with exact analytic backward passes, a small
//! SGD/Adam trainer, and the `GGWT` weight file format.
//!
//! Models run in `f32`. Every layer is generic over [`Scalar`] so the same
//! code can be instantiated in `f64` for numerical verification.

mod error;
pub mod layers;
pub mod loss;
mod network;
mod optim;
mod tensor;
pub mod weights;

#[cfg(feature = "gradcheck")]
pub mod gradcheck;

pub use error::{Result, TensorError};
pub use layers::{BatchNorm, Conv2d, Layer, LayerKind, LeakyMaxBlock, Linear, MaxPool2, Mode, Param, ParamRole, Relu, ReluTn, StateRole};
pub use network::Sequential;
pub use optim::{centralize_weights, sgd_step, Adam, AdamConfig, Sgd, SgdConfig};
pub use tensor::{matmul, Scalar, Tensor};
pub use weights::{WeightFile, WeightFileError, WeightRecord};
