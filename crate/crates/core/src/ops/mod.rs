//! Dense tensor primitives: convolution, batch norm, bilinear resize,
//! pooling and elementwise ops, plus the backward passes the tape uses.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod resize;

pub use conv::{col2im, conv2d, conv2d_backward, conv2d_direct, conv_out_len, im2col, ConvGrads, ConvKernel};
pub use elementwise::{add, add_assign, argmax_channel, concat_channels, relu, relu_backward, split_channels, LabelMap};
pub use norm::{batch_norm_eval, batch_norm_train, batch_norm_train_backward, batch_stats, BatchNorm, BatchStats, BN_EPS, BN_MOMENTUM};
pub use pool::{avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward};
pub use resize::{bilinear_resize, bilinear_resize_backward};

/// Whether batch norm uses stored running statistics or the current batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train,
}
