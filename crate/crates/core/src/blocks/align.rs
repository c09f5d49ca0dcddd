//! Attention-based implicit alignment of the three exposures.

use candle_core::Tensor;

use crate::error::{config_err, Result};
use crate::nn::{ops, Conv2d, Scope};

const REFERENCE: usize = 1;

/// Shared per-frame encoder; each non-reference feature is gated by a sigmoid
/// map computed from itself and the reference feature (one attention network
/// shared by both non-reference frames), then all three are merged back to
/// `channels`.
#[derive(Debug, Clone)]
pub struct AlignmentModule {
    encode: Conv2d,
    att1: Conv2d,
    att2: Conv2d,
    merge: Conv2d,
}

impl AlignmentModule {
    pub fn new(vs: &Scope, in_channels: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            encode: Conv2d::new(&vs.pp("encode"), in_channels, channels, 3)?,
            att1: Conv2d::new(&vs.pp("att1"), 2 * channels, 2 * channels, 3)?,
            att2: Conv2d::new(&vs.pp("att2"), 2 * channels, channels, 3)?,
            merge: Conv2d::new(&vs.pp("merge"), 3 * channels, channels, 3)?,
        })
    }

    fn encode(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        if frames.len() != 3 {
            return Err(config_err!(
                "alignment expects 3 frames, got {}",
                frames.len()
            ));
        }
        frames
            .iter()
            .map(|f| Ok(self.encode.forward(f)?.relu()?))
            .collect()
    }

    /// The two sigmoid attention maps (for frames 0 and 2).
    pub fn attention_maps(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let feats = self.encode(frames)?;
        self.maps(&feats)
    }

    fn maps(&self, feats: &[Tensor]) -> Result<Vec<Tensor>> {
        [0usize, 2]
            .iter()
            .map(|&i| {
                let pair = Tensor::cat(&[&feats[i], &feats[REFERENCE]], 1)?;
                ops::sigmoid(&self.att2.forward(&self.att1.forward(&pair)?.relu()?)?)
            })
            .collect()
    }

    pub fn forward(&self, frames: &[Tensor]) -> Result<Tensor> {
        let feats = self.encode(frames)?;
        let maps = self.maps(&feats)?;
        let f0 = (&feats[0] * &maps[0])?;
        let f2 = (&feats[2] * &maps[1])?;
        self.merge
            .forward(&Tensor::cat(&[&f0, &feats[REFERENCE], &f2], 1)?)
    }
}
