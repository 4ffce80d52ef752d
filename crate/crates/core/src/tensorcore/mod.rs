//! Dense tensors, a recording tape for reverse-mode differentiation, and Adam.

mod adam;
mod ops;
mod resize;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{
    backward_op, channel_stats, conv2d, conv_out_extent, forward_op, matmul, sigmoid, transpose,
    BnMode, Op, BN_EPS, L2_EPS,
};
pub use resize::bilinear_resize;
pub use tape::{grad_check, GradCheckOptions, Gradients, NodeId, Tape};
pub use tensor::Tensor;
