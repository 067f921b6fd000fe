//! Dense tensors, tape autodiff, and the optimizer used for training.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{CustomOp, Graph, Var};
pub use ops::{layer_norm, masked_softmax, matmul, Mask};
pub use optim::{noam_lr, Adam, OptimConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::RngStreams;
pub use tensor::Tensor;
