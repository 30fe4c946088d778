//! Tape-free forward kernels and their adjoints.

pub mod activation;
pub mod conv;
pub mod layout;
pub mod loss;
pub mod norm;
pub mod resize;

pub use activation::{gelu, prelu, sigmoid, softmax};
pub use conv::{conv2d, ConvKind, ConvSpec};
pub use layout::{concat_channels, crop, pad_reflect, slice_channels};
pub use loss::l1_loss;
pub use norm::{layer_norm, LAYER_NORM_EPS};
pub use resize::{bilinear_resize, upsample_nearest2x};
