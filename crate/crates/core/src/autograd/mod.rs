//! A small reverse-mode autodiff engine over dense `f32` tensors.
//!
//! Feature maps are channels-last `[D, H, W, C]`. Ops take a [`Graph`] and
//! return new [`Var`]s; the graph keeps just enough state to run the
//! backward pass once.

mod attention;
mod conv;
mod elementwise;
pub(crate) mod gemm;
mod graph;
mod norm;
mod spatial;
mod tensor;

pub use attention::{attention_probabilities, bias_table_len, window_attention};
pub use conv::{conv3d, linear, max_pool2};
pub use elementwise::{add, concat_channels, gelu, leaky_relu, scale, weighted_sum};
pub(crate) use graph::BackwardFn;
pub use graph::{Gradients, Graph, Var};
pub use norm::layer_norm;
pub use spatial::{affine_field, global_avg_pool, pixel_shuffle, upsample, warp};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
