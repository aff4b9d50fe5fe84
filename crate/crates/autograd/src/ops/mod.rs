mod basic;
mod conv;
mod spatial;

pub use basic::{concat, log_softmax_last, reduce_to_shape, softmax_last, stack};
pub use conv::{conv_backward_input, conv_backward_weight, conv_forward, rectified_conv_forward, ConvGeometry};
pub use spatial::bilinear_resize;
