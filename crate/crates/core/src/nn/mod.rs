//! Parameter storage and the small set of differentiable layers the
//! networks are assembled from. Tensors are NCHW.

mod conv;
pub mod gradcheck;
mod layers;
pub mod ops;
mod params;

pub use conv::{conv2d, depthwise3x3};
pub use layers::{ChannelNorm, Conv2d, DepthwiseConv3x3, Linear};
pub use params::{Init, ParamStore, Scope};
