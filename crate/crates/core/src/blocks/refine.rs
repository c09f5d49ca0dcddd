//! Frequency-decoupled refinement: the feature refinement module (FRM) and its
//! prior-conditioned variant (PIM).

use candle_core::Tensor;

use super::attention::{CrossAttention, GatedFfn, LowFrequencyTransformer};
use super::residual::{ChannelAttention, ResidualBlock};
use crate::error::{shape_err, Result};
use crate::nn::{ops, Conv2d, Scope};

/// Splits `F` into `(Avgpool(F, k), F - Upsample(Avgpool(F, k)))` with
/// nearest-neighbour upsampling, so `Upsample(low) + high == F`.
pub fn frequency_split(f: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let low = ops::avg_pool(f, k)?;
    let high = (f - ops::upsample_nearest(&low, k)?)?;
    Ok((low, high))
}

/// Shared FRM/PIM topology: residual block, split, high branch through a
/// residual block, low branch through a caller-supplied transform, fuse with a
/// 1x1 convolution and channel attention.
#[derive(Debug, Clone)]
struct Skeleton {
    rb_in: ResidualBlock,
    rb_high: ResidualBlock,
    fuse: Conv2d,
    ca: ChannelAttention,
    pool: usize,
}

impl Skeleton {
    fn new(vs: &Scope, channels: usize, pool: usize) -> Result<Self> {
        Ok(Self {
            rb_in: ResidualBlock::new(&vs.pp("rb_in"), channels)?,
            rb_high: ResidualBlock::new(&vs.pp("rb_high"), channels)?,
            fuse: Conv2d::new(&vs.pp("fuse"), 2 * channels, channels, 1)?,
            ca: ChannelAttention::new(&vs.pp("ca"), channels)?,
            pool,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        low_fn: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % self.pool != 0 || w % self.pool != 0 {
            return Err(shape_err!(
                "feature map {h}x{w} is not divisible by pool size {}",
                self.pool
            ));
        }
        let f = self.rb_in.forward(x)?;
        let (low, high) = frequency_split(&f, self.pool)?;
        let high = self.rb_high.forward(&high)?;
        let low = ops::upsample_nearest(&low_fn(&low)?, self.pool)?;
        let fused = self.fuse.forward(&Tensor::cat(&[&high, &low], 1)?)?;
        self.ca.forward(&fused)
    }
}

/// Feature refinement module: the low-frequency branch is a transposed
/// self-attention transformer.
#[derive(Debug, Clone)]
pub struct Frm {
    skeleton: Skeleton,
    low: LowFrequencyTransformer,
}

impl Frm {
    pub fn new(
        vs: &Scope,
        channels: usize,
        heads: usize,
        expansion: f64,
        pool: usize,
    ) -> Result<Self> {
        Ok(Self {
            skeleton: Skeleton::new(vs, channels, pool)?,
            low: LowFrequencyTransformer::new(&vs.pp("low"), channels, heads, expansion)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.skeleton.forward(x, |low| self.low.forward(low))
    }
}

/// Prior integration module: the low-frequency branch cross-attends to the
/// low-frequency prior `z`, whose resolution must equal the pooled features.
#[derive(Debug, Clone)]
pub struct Pim {
    skeleton: Skeleton,
    cross: CrossAttention,
    ffn: GatedFfn,
}

impl Pim {
    pub fn new(
        vs: &Scope,
        channels: usize,
        prior_channels: usize,
        expansion: f64,
        pool: usize,
    ) -> Result<Self> {
        Ok(Self {
            skeleton: Skeleton::new(vs, channels, pool)?,
            cross: CrossAttention::new(&vs.pp("cross"), channels, prior_channels)?,
            ffn: GatedFfn::new(&vs.pp("ffn"), channels, expansion)?,
        })
    }

    pub fn forward(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let p = self.skeleton.pool;
        let zd = z.dims();
        if zd.len() != 4 || zd[0] != n || zd[2] * p != h || zd[3] * p != w {
            return Err(shape_err!(
                "prior {:?} does not match features {:?} pooled by {p}",
                zd,
                x.dims()
            ));
        }
        self.skeleton
            .forward(x, |low| self.ffn.forward(&self.cross.forward(low, z)?))
    }

    /// The same module with the cross-attention contribution removed; equals
    /// [`Pim::forward`] while the cross-attention projection is zero.
    pub fn forward_without_prior(&self, x: &Tensor) -> Result<Tensor> {
        self.skeleton.forward(x, |low| self.ffn.forward(low))
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

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn split_identity_and_checkerboard() {
        let f = rand((1, 2, 8, 8));
        for k in [2, 4] {
            let (low, high) = frequency_split(&f, k).unwrap();
            let back = (ops::upsample_nearest(&low, k).unwrap() + high).unwrap();
            assert!(max_abs(&back, &f) < 1e-12);
        }
        let v: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let board = Tensor::from_vec(v.clone(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let (low, high) = frequency_split(&board, 2).unwrap();
        assert!(low
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .all(|&x| x == 0.5));
        let high = high.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (h, b) in high.iter().zip(&v) {
            assert_eq!(*h, b - 0.5);
        }
        assert!(frequency_split(&rand((1, 1, 6, 6)), 4).is_err());
    }

    #[test]
    fn shapes_and_prior_checks() {
        let store = ParamStore::new(DType::F64, 11);
        let frm = Frm::new(&store.root().pp("frm"), 12, 3, 2.66, 2).unwrap();
        let x = rand((2, 12, 8, 8));
        assert_eq!(frm.forward(&x).unwrap().dims(), x.dims());
        let pim = Pim::new(&store.root().pp("pim"), 12, 3, 2.66, 4).unwrap();
        assert_eq!(
            pim.forward(&x, &rand((2, 3, 2, 2))).unwrap().dims(),
            x.dims()
        );
        assert!(pim.forward(&x, &rand((2, 3, 4, 4))).is_err());
        // at init the cross-attention projection is zero: prior has no effect
        let a = pim.forward(&x, &rand((2, 3, 2, 2))).unwrap();
        let b = pim.forward_without_prior(&x).unwrap();
        assert!(max_abs(&a, &b) == 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn split_reconstructs(k in prop::sample::select(vec![2usize, 4]), bh in 1usize..4,
                                  bw in 1usize..4, c in 1usize..4,
                                  v in prop::collection::vec(-10.0f64..10.0, 16 * 16 * 3)) {
                let (h, w) = (bh * k, bw * k);
                let f = Tensor::from_vec(v[..c * h * w].to_vec(), (1, c, h, w), &Device::Cpu).unwrap();
                let (low, high) = frequency_split(&f, k).unwrap();
                prop_assert_eq!(low.dims(), &[1, c, bh, bw]);
                let back = (ops::upsample_nearest(&low, k).unwrap() + high).unwrap();
                let scale = 1.0 + max_abs(&f, &f.zeros_like().unwrap());
                prop_assert!(max_abs(&back, &f) <= 1e-12 * scale);
            }
        }
    }
}
