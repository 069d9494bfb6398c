//! Residual U-Net with hand-written forward and backward passes.

mod ops;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{
    backward, count_parameters, forward, init_weights, BnMode, ForwardPass, Gradients, UNetConfig, Variant,
    WeightSet,
};
