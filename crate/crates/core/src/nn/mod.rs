//! Minimal CPU layer engine.
//!
//! Activations are `Array4` tensors in NCHW order. Every layer exposes a pure
//! `forward` that returns a cache plus an explicit `backward` that consumes it
//! and accumulates parameter gradients. Batch-norm running statistics are
//! folded in separately through `absorb_stats`, so a forward pass never
//! mutates the model and one parameter set can serve several inputs.

mod act;
mod conv;
mod norm;
mod param;
mod pool;
mod real;

pub use act::{relu, relu_backward, softmax_channels, softmax_channels_backward};
pub use conv::Conv2d;
pub use norm::{BatchNorm, BnCache};
pub use param::{Param, ParamRole};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d, MaxPoolCache};
pub use real::Real;

/// Whether normalization layers use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
