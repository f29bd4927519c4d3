//! Differentiable primitives. Every kernel is a pure function and ships with a
//! hand-written vector-Jacobian product plus an exact multiply-add tally.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, relu_vjp};
pub use batchnorm::{
    batch_stats, batchnorm, batchnorm_madds, batchnorm_vjp, batchnorm_vjp_madds, BatchStats, BnGrads, BnMode, BnParams, BN_EPSILON,
};
pub use conv::{conv2d, conv2d_madds, conv2d_vjp, conv2d_vjp_madds, ConvGrads, ConvParams};
pub use linear::{linear, linear_madds, linear_vjp, pool_and_head, pool_and_head_madds, pool_and_head_vjp, LinearGrads, LinearParams};
pub use loss::{error_rate, softmax_xent};
pub use pool::{avg_pool2, avg_pool2_vjp, global_avg_pool, global_avg_pool_vjp, pad_channels, pad_channels_vjp};
