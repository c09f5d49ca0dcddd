pub mod blocks;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod nn;
pub mod training;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
