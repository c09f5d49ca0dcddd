use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{ops, Conv2d, Scope};

/// `x + conv3x3(relu(conv3x3(x)))`; the second convolution starts at zero.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new(vs: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&vs.pp("conv1"), channels, channels, 3)?,
            conv2: Conv2d::zeroed(&vs.pp("conv2"), channels, channels, 3)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(x)?.relu()?;
        Ok((x + self.conv2.forward(&y)?)?)
    }
}

/// Squeeze-excitation gating: global average pool, bottleneck, sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl ChannelAttention {
    const REDUCTION: usize = 4;

    pub fn new(vs: &Scope, channels: usize) -> Result<Self> {
        let mid = (channels / Self::REDUCTION).max(1);
        Ok(Self {
            squeeze: Conv2d::new(&vs.pp("squeeze"), channels, mid, 1)?,
            excite: Conv2d::new(&vs.pp("excite"), mid, channels, 1)?,
        })
    }

    /// Per-channel gates in `(0, 1)`, shape `[N, C, 1, 1]`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let hidden = self.squeeze.forward(&pooled)?.relu()?;
        ops::sigmoid(&self.excite.forward(&hidden)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.gates(x)?)?)
    }
}
