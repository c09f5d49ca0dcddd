//! Time-conditioned NAFBlocks for the latent denoiser.

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Result};
use crate::nn::{ops, ChannelNorm, Conv2d, DepthwiseConv3x3, Linear, Scope};

/// Transformer-style sinusoidal encoding of integer timesteps, `[len(t), dim]`:
/// the first half holds `sin(t * f_i)`, the second `cos(t * f_i)` with
/// `f_i = 10000^(-i / (dim/2 - 1))`.
pub fn sinusoidal_embedding(
    t: &[usize],
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if dim < 4 || dim % 2 != 0 {
        return Err(shape_err!(
            "time embedding dim must be even and >= 4, got {dim}"
        ));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp());
        let args: Vec<f64> = freqs.map(|f| step as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoid followed by a SimpleGate MLP; output width `4 * dim`.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(vs: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&vs.pp("fc1"), dim, 8 * dim)?,
            fc2: Linear::new(&vs.pp("fc2"), 4 * dim, 4 * dim)?,
            dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        4 * self.dim
    }

    /// Raw encoding of `t` plus the MLP: `[len(t), 4 * dim]`.
    pub fn forward(&self, t: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let enc = sinusoidal_embedding(t, self.dim, dtype, device)?;
        self.fc2
            .forward(&ops::simple_gate(&self.fc1.forward(&enc)?)?)
    }
}

/// Per-block projection of the time embedding to channel-wise shift and
/// scale for the two sub-layers of a [`NafBlock`].
#[derive(Debug, Clone)]
pub struct TimeModulation {
    proj: Linear,
    channels: usize,
}

/// `(shift, scale)` for one sub-layer, each `[N, C, 1, 1]`.
pub type ShiftScale = (Tensor, Tensor);

impl TimeModulation {
    pub fn new(vs: &Scope, time_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&vs.pp("proj"), time_dim / 2, 4 * channels)?,
            channels,
        })
    }

    /// Returns modulation for the attention and feed-forward sub-layers.
    pub fn forward(&self, temb: &Tensor) -> Result<(ShiftScale, ShiftScale)> {
        let p = self.proj.forward(&ops::simple_gate(temb)?)?;
        let n = p.dim(0)?;
        let c = self.channels;
        let part =
            |i: usize| -> Result<Tensor> { Ok(p.narrow(1, i * c, c)?.reshape((n, c, 1, 1))?) };
        Ok(((part(0)?, part(1)?), (part(2)?, part(3)?)))
    }
}

fn modulate(x: &Tensor, (shift, scale): &ShiftScale) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

/// NAFBlock with time modulation. Each sub-layer is
/// `x + W(f(modulate(LN(x))))`; the attention sub-layer uses
/// depthwise conv + SimpleGate + simplified channel attention, the
/// feed-forward sub-layer a SimpleGate between pointwise convolutions.
#[derive(Debug, Clone)]
pub struct NafBlock {
    time: TimeModulation,
    norm1: ChannelNorm,
    conv1: Conv2d,
    dw: DepthwiseConv3x3,
    sca: Conv2d,
    conv3: Conv2d,
    norm2: ChannelNorm,
    conv4: Conv2d,
    conv5: Conv2d,
}

impl NafBlock {
    pub fn new(vs: &Scope, channels: usize, time_dim: usize) -> Result<Self> {
        let c = channels;
        Ok(Self {
            time: TimeModulation::new(&vs.pp("time"), time_dim, c)?,
            norm1: ChannelNorm::new(&vs.pp("norm1"), c)?,
            conv1: Conv2d::new(&vs.pp("conv1"), c, 2 * c, 1)?,
            dw: DepthwiseConv3x3::new(&vs.pp("dw"), 2 * c)?,
            sca: Conv2d::new(&vs.pp("sca"), c, c, 1)?,
            conv3: Conv2d::zeroed(&vs.pp("conv3"), c, c, 1)?,
            norm2: ChannelNorm::new(&vs.pp("norm2"), c)?,
            conv4: Conv2d::new(&vs.pp("conv4"), c, 2 * c, 1)?,
            conv5: Conv2d::zeroed(&vs.pp("conv5"), c, c, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (att_mod, ffn_mod) = self.time.forward(temb)?;
        let h = modulate(&self.norm1.forward(x)?, &att_mod)?;
        let h = ops::simple_gate(&self.dw.forward(&self.conv1.forward(&h)?)?)?;
        let gap = h.mean_keepdim(3)?.mean_keepdim(2)?;
        let h = h.broadcast_mul(&self.sca.forward(&gap)?)?;
        let y = (x + self.conv3.forward(&h)?)?;
        let h = modulate(&self.norm2.forward(&y)?, &ffn_mod)?;
        let h = ops::simple_gate(&self.conv4.forward(&h)?)?;
        Ok((y + self.conv5.forward(&h)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn encodings_are_distinct() {
        let e = sinusoidal_embedding(&(1..=200).collect::<Vec<_>>(), 32, DType::F64, &Device::Cpu)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for i in 0..e.len() {
            for j in i + 1..e.len() {
                let d: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-3, "t={} and t={} collide", i + 1, j + 1);
            }
        }
        assert!(sinusoidal_embedding(&[1], 7, DType::F64, &Device::Cpu).is_err());
    }

    #[test]
    fn block_is_identity_at_init_and_shapes_match() {
        let store = ParamStore::new(DType::F64, 3);
        let te = TimeEmbedding::new(&store.root().pp("te"), 16).unwrap();
        let temb = te.forward(&[3, 150], DType::F64, &Device::Cpu).unwrap();
        assert_eq!(temb.dims(), &[2, 64]);
        let block = NafBlock::new(&store.root().pp("naf"), 8, te.out_dim()).unwrap();
        let ((shift, scale), _) = block.time.forward(&temb).unwrap();
        assert_eq!(shift.dims(), &[2, 8, 1, 1]);
        assert_eq!(scale.dims(), &[2, 8, 1, 1]);
        let x = Tensor::randn(0f64, 1.0, (2, 8, 4, 4), &Device::Cpu).unwrap();
        let y = block.forward(&x, &temb).unwrap();
        let diff = (y - &x)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }
}
