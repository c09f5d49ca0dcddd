//! Channel-wise ("transposed") attention in the style of Restormer, its
//! gated feed-forward companion, and the prior cross-attention.
//!
//! All attention maps here are channel x channel, never pixel x pixel, so the
//! cost is linear in the number of pixels.

use candle_core::Tensor;

use crate::error::{config_err, shape_err, Result};
use crate::nn::{ops, ChannelNorm, Conv2d, DepthwiseConv3x3, Init, Scope};

/// Multi-head transposed self-attention with a residual connection.
///
/// Q, K and V come from a pointwise then depthwise projection of the
/// normalized input. Per head, Q and K are L2-normalized over pixels and the
/// `(C/h) x (C/h)` map is `softmax(temperature * Q K^T)` along its last axis.
#[derive(Debug, Clone)]
pub struct TransposedSelfAttention {
    norm: ChannelNorm,
    qkv: Conv2d,
    qkv_dw: DepthwiseConv3x3,
    temperature: Tensor,
    proj: Conv2d,
    heads: usize,
}

impl TransposedSelfAttention {
    pub fn new(vs: &Scope, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(config_err!(
                "{channels} channels cannot be split into {heads} heads"
            ));
        }
        Ok(Self {
            norm: ChannelNorm::new(&vs.pp("norm"), channels)?,
            qkv: Conv2d::new(&vs.pp("qkv"), channels, 3 * channels, 1)?,
            qkv_dw: DepthwiseConv3x3::new(&vs.pp("qkv_dw"), 3 * channels)?,
            temperature: vs.get("temperature", heads, Init::Const(1.0))?,
            proj: Conv2d::zeroed(&vs.pp("proj"), channels, channels, 1)?,
            heads,
        })
    }

    /// The softmax-normalized attention maps, `[N, heads, C/h, C/h]`.
    pub fn attention_map(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = x.dims4()?;
        let ch = c / self.heads;
        let qkv = self
            .qkv_dw
            .forward(&self.qkv.forward(&self.norm.forward(x)?)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(1, i * c, c)?
                .contiguous()?
                .reshape((n, self.heads, ch, h * w))?)
        };
        let q = ops::l2_normalize_last(&split(0)?)?;
        let k = ops::l2_normalize_last(&split(1)?)?;
        let v = split(2)?;
        let logits = q
            .matmul(&k.t()?.contiguous()?)?
            .broadcast_mul(&self.temperature.reshape((1, self.heads, 1, 1))?)?;
        Ok((ops::softmax(&logits, 3)?, v))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (attn, v) = self.attention_map(x)?;
        let out = attn.matmul(&v)?.reshape((n, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

/// Gated depthwise feed-forward with a residual connection.
///
/// The hidden width is `floor(expansion * C)` rounded down to an even number;
/// one half gates the other through GELU.
#[derive(Debug, Clone)]
pub struct GatedFfn {
    norm: ChannelNorm,
    project_in: Conv2d,
    dw: DepthwiseConv3x3,
    project_out: Conv2d,
}

impl GatedFfn {
    pub fn hidden_width(channels: usize, expansion: f64) -> usize {
        let raw = (expansion * channels as f64).floor() as usize;
        (raw - raw % 2).max(2)
    }

    pub fn new(vs: &Scope, channels: usize, expansion: f64) -> Result<Self> {
        let hidden = Self::hidden_width(channels, expansion);
        Ok(Self {
            norm: ChannelNorm::new(&vs.pp("norm"), channels)?,
            project_in: Conv2d::new(&vs.pp("project_in"), channels, hidden, 1)?,
            dw: DepthwiseConv3x3::new(&vs.pp("dw"), hidden)?,
            project_out: Conv2d::zeroed(&vs.pp("project_out"), hidden / 2, channels, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self
            .dw
            .forward(&self.project_in.forward(&self.norm.forward(x)?)?)?;
        let half = y.dim(1)? / 2;
        let gated = (y.narrow(1, 0, half)?.gelu()? * y.narrow(1, half, half)?)?;
        Ok((x + self.project_out.forward(&gated)?)?)
    }
}

/// Self-attention followed by the gated FFN: the low-frequency branch of a
/// feature refinement module.
#[derive(Debug, Clone)]
pub struct LowFrequencyTransformer {
    attn: TransposedSelfAttention,
    ffn: GatedFfn,
}

impl LowFrequencyTransformer {
    pub fn new(vs: &Scope, channels: usize, heads: usize, expansion: f64) -> Result<Self> {
        Ok(Self {
            attn: TransposedSelfAttention::new(&vs.pp("attn"), channels, heads)?,
            ffn: GatedFfn::new(&vs.pp("ffn"), channels, expansion)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.ffn.forward(&self.attn.forward(x)?)
    }
}

/// Single-head cross-attention from features `F` (queries) to the prior `z`
/// (keys and values):
///
/// `F_hat = W_c (V A) + F`, `A = softmax(K Q^T / gamma)`, `A` of shape
/// `N_prior x C`. The softmax runs over the prior-channel axis, so every
/// column of `A` sums to one and each output channel is a convex mixture of
/// the prior's value maps. Q and K are L2-normalized over pixels.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: ChannelNorm,
    q: Conv2d,
    q_dw: DepthwiseConv3x3,
    kv: Conv2d,
    kv_dw: DepthwiseConv3x3,
    gamma: Tensor,
    proj: Conv2d,
    prior_channels: usize,
}

impl CrossAttention {
    pub fn new(vs: &Scope, channels: usize, prior_channels: usize) -> Result<Self> {
        Ok(Self {
            norm: ChannelNorm::new(&vs.pp("norm"), channels)?,
            q: Conv2d::new(&vs.pp("q"), channels, channels, 1)?,
            q_dw: DepthwiseConv3x3::new(&vs.pp("q_dw"), channels)?,
            kv: Conv2d::new(&vs.pp("kv"), prior_channels, 2 * prior_channels, 1)?,
            kv_dw: DepthwiseConv3x3::new(&vs.pp("kv_dw"), 2 * prior_channels)?,
            gamma: vs.get("gamma", 1, Init::Const(1.0))?,
            proj: Conv2d::zeroed(&vs.pp("proj"), channels, channels, 1)?,
            prior_channels,
        })
    }

    /// Returns `(A, V)` with `A: [N, N_prior, C]` and `V: [N, N_prior, HW]`.
    pub fn attention_map(&self, f: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = f.dims4()?;
        let (zn, zc, zh, zw) = z.dims4()?;
        if (zn, zh, zw) != (n, h, w) || zc != self.prior_channels {
            return Err(shape_err!(
                "cross-attention: features {:?} vs prior {:?} ({} prior channels expected)",
                f.dims(),
                z.dims(),
                self.prior_channels
            ));
        }
        let np = self.prior_channels;
        let q = self
            .q_dw
            .forward(&self.q.forward(&self.norm.forward(f)?)?)?;
        let q = ops::l2_normalize_last(&q.reshape((n, c, h * w))?)?;
        let kv = self.kv_dw.forward(&self.kv.forward(z)?)?;
        let k = kv.narrow(1, 0, np)?.contiguous()?.reshape((n, np, h * w))?;
        let k = ops::l2_normalize_last(&k)?;
        let v = kv
            .narrow(1, np, np)?
            .contiguous()?
            .reshape((n, np, h * w))?;
        let logits = k
            .matmul(&q.t()?.contiguous()?)?
            .broadcast_div(&self.gamma.reshape((1, 1, 1))?)?;
        Ok((ops::softmax(&logits, 1)?, v))
    }

    pub fn forward(&self, f: &Tensor, z: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = f.dims4()?;
        let (a, v) = self.attention_map(f, z)?;
        // (HW x N_prior) . (N_prior x C) -> HW x C, stored channel-major
        let mixed = a.t()?.contiguous()?.matmul(&v)?; // [N, C, HW]
        let out = mixed.reshape((n, c, h, w))?;
        Ok((f + self.proj.forward(&out)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn rand(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_projection_means_identity() {
        let store = ParamStore::new(DType::F64, 4);
        let x = rand((2, 12, 4, 4));
        let sa = TransposedSelfAttention::new(&store.root().pp("sa"), 12, 3).unwrap();
        assert_eq!(flat(&sa.forward(&x).unwrap()), flat(&x));
        let ffn = GatedFfn::new(&store.root().pp("ffn"), 12, 2.66).unwrap();
        assert_eq!(flat(&ffn.forward(&x).unwrap()), flat(&x));
        let ca = CrossAttention::new(&store.root().pp("ca"), 12, 3).unwrap();
        let z = rand((2, 3, 4, 4));
        assert_eq!(flat(&ca.forward(&x, &z).unwrap()), flat(&x));
    }

    #[test]
    fn self_attention_rows_are_distributions() {
        let store = ParamStore::new(DType::F64, 5);
        let sa = TransposedSelfAttention::new(&store.root(), 12, 3).unwrap();
        let (attn, _) = sa.attention_map(&rand((1, 12, 4, 4))).unwrap();
        assert_eq!(attn.dims(), &[1, 3, 4, 4]);
        for s in flat(&attn.sum(3).unwrap()) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(TransposedSelfAttention::new(&store.root().pp("bad"), 10, 3).is_err());
    }

    #[test]
    fn cross_attention_map_shape_and_normalization() {
        let store = ParamStore::new(DType::F64, 6);
        let ca = CrossAttention::new(&store.root(), 60, 3).unwrap();
        let (a, v) = ca
            .attention_map(&rand((1, 60, 4, 4)), &rand((1, 3, 4, 4)))
            .unwrap();
        assert_eq!(a.dims(), &[1, 3, 60]);
        assert_eq!(v.dims(), &[1, 3, 16]);
        for s in flat(&a.sum(1).unwrap()) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(ca
            .forward(&rand((1, 60, 4, 4)), &rand((1, 3, 2, 2)))
            .is_err());
    }

    #[test]
    fn ffn_hidden_width_is_even() {
        assert_eq!(GatedFfn::hidden_width(60, 2.66), 158);
        assert_eq!(GatedFfn::hidden_width(16, 2.66), 42);
        assert_eq!(GatedFfn::hidden_width(8, 2.66), 20);
    }
}
