//! Minimal dense tensor engine: values, a reverse-mode tape, the operator set
//! the network needs, an optimizer and a finite-difference oracle.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod pool;
pub mod resample;
pub mod tape;
pub mod tensor;

pub use attention::{multi_head_axial_attention, AttnAxis, AttnWeights};
pub use conv::{conv2d, conv2d_flops, ConvParams};
pub use gradcheck::{check_op, finite_diff_grad, rel_err, GradCheckReport};
pub use norm::{batch_norm, layer_norm, NormMode, RunningStats};
pub use ops::{bmm_tensor, expand_tensor, gelu_scalar, permute_tensor, sigmoid_scalar, softmax_tensor, softplus_scalar, sum_to_shape};
pub use optim::{adamw_step, poly_lr, AdamWConfig, AdamWState};
pub use pool::{pool_axis_avg, strip_pool, PoolAxis, StripOrientation};
pub use resample::{interpolate_bilinear, sample_bilinear};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

#[cfg(test)]
mod tests;
