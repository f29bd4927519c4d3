//! Reversible residual networks with activation-free backpropagation.
//!
//! The crate provides dense NCHW kernels with exact multiply-add counting,
//! additive reversible blocks, a backprop engine that reconstructs
//! activations instead of storing them, the ResNet/RevNet family builders, and
//! a small deterministic trainer.

pub mod arch;
pub mod coupling;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod residual;
pub mod revgrad;
pub mod tensor;
pub mod train;

pub use coupling::{merge_channels, split_channels, Coupling, PartitionedTensor, ReversibleBlock};
pub use error::{Error, Result};
pub use metrics::{grad_angle, AngleReport, Ctx, MemMeter, OpCount, Phase};
pub use residual::{BnSource, Init, ResidualFn};
pub use revgrad::{block_reverse_backprop, stack_backward, stack_forward, GradBundle, StackCheckpoint, StackGrads};
pub use tensor::{Scalar, Shape, Tensor};
