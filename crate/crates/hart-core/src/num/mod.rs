//! Dense-tensor numeric core: storage, reverse-mode autodiff, kernels,
//! and the optimizer.

pub mod kernels;
pub mod macs;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;


pub use optim::AdamW;
pub use tensor::Tensor;
