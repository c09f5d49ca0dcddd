use candle_core::Tensor;

use super::params::{Init, Scope};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding for odd `k` and stride 1.
    pub fn new(vs: &Scope, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_init(vs, c_in, c_out, k, 1, k / 2, false)
    }

    /// Same as [`Conv2d::new`] but starting from all-zero weights.
    pub fn zeroed(vs: &Scope, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_init(vs, c_in, c_out, k, 1, k / 2, true)
    }

    pub fn strided(vs: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(vs, c_in, c_out, k, stride, 0, false)
    }

    fn with_init(
        vs: &Scope,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        zero: bool,
    ) -> Result<Self> {
        let init = if zero {
            Init::Const(0.0)
        } else {
            Init::KaimingUniform {
                fan_in: c_in * k * k,
            }
        };
        Ok(Self {
            weight: vs.get("weight", (c_out, c_in, k, k), init)?,
            bias: vs.get("bias", c_out, Init::Const(0.0))?,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Per-channel 3x3 convolution, zero padded.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(vs: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.get("weight", (channels, 9), Init::KaimingUniform { fan_in: 9 })?,
            bias: vs.get("bias", channels, Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = super::conv::depthwise3x3(x, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization over the channel axis of every pixel.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    weight: Tensor,
    bias: Tensor,
}

impl ChannelNorm {
    const EPS: f64 = 1e-6;

    pub fn new(vs: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.get("weight", channels, Init::Const(1.0))?,
            bias: vs.get("bias", channels, Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, Self::EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vs: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(vs, d_in, d_out, Init::KaimingUniform { fan_in: d_in })
    }

    pub fn zeroed(vs: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(vs, d_in, d_out, Init::Const(0.0))
    }

    fn with_init(vs: &Scope, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: vs.get("weight", (d_out, d_in), init)?,
            bias: vs.get("bias", d_out, Init::Const(0.0))?,
        })
    }

    /// `x: [N, d_in] -> [N, d_out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias.unsqueeze(0)?)?)
    }
}
