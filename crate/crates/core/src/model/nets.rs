//! The three sub-networks: prior extractor, latent denoiser and the
//! reconstruction trunk.

use candle_core::Tensor;

use super::LfDiffConfig;
use crate::blocks::{Frm, NafBlock, Pim, ResidualBlock, TimeEmbedding};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ops, Conv2d, Scope};

/// `conv3x3 -> residual blocks -> conv3x3` to the prior channel count.
#[derive(Debug, Clone)]
pub struct Lpenet {
    head: Conv2d,
    blocks: Vec<ResidualBlock>,
    tail: Conv2d,
}

impl Lpenet {
    pub fn new(vs: &Scope, in_channels: usize, cfg: &LfDiffConfig) -> Result<Self> {
        let c = cfg.lpenet_channels;
        Ok(Self {
            head: Conv2d::new(&vs.pp("head"), in_channels, c, 3)?,
            blocks: (0..cfg.lpenet_blocks)
                .map(|i| ResidualBlock::new(&vs.pp(format!("rb_{i}")), c))
                .collect::<Result<_>>()?,
            tail: Conv2d::new(&vs.pp("tail"), c, cfg.lpr_channels, 3)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.head.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.tail.forward(&h)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Conv2d,
    blocks: Vec<NafBlock>,
}

/// U-Net of time-modulated NAFBlocks predicting the noise in `z_t` given the
/// condition `D`. Encoder stages run at `base * multipliers[..n-1]`, the
/// middle at `base * multipliers[n-1]`; downsampling is a strided 2x2
/// convolution, upsampling nearest-neighbour followed by a 1x1 convolution,
/// and skips are added.
#[derive(Debug, Clone)]
pub struct Denoiser {
    time: TimeEmbedding,
    intro: Conv2d,
    encoders: Vec<(Vec<NafBlock>, Conv2d)>,
    middle: Vec<NafBlock>,
    decoders: Vec<DecoderStage>,
    ending: Conv2d,
    timesteps: usize,
    pad: usize,
}

impl Denoiser {
    pub fn new(vs: &Scope, cfg: &LfDiffConfig) -> Result<Self> {
        let base = cfg.denoiser_base_channels;
        let widths: Vec<usize> = cfg.denoiser_multipliers.iter().map(|m| m * base).collect();
        let depth = widths.len();
        let time = TimeEmbedding::new(&vs.pp("time"), base)?;
        let td = time.out_dim();
        let stage = |s: &Scope, c: usize, n: usize| -> Result<Vec<NafBlock>> {
            (0..n)
                .map(|j| NafBlock::new(&s.pp(format!("block_{j}")), c, td))
                .collect()
        };
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for i in 0..depth - 1 {
            let s = vs.pp(format!("enc_{i}"));
            encoders.push((
                stage(&s, widths[i], cfg.denoiser_blocks_per_stage)?,
                Conv2d::strided(&s.pp("down"), widths[i], widths[i + 1], 2, 2)?,
            ));
        }
        for i in (0..depth - 1).rev() {
            let s = vs.pp(format!("dec_{i}"));
            decoders.push(DecoderStage {
                up: Conv2d::new(&s.pp("up"), widths[i + 1], widths[i], 1)?,
                blocks: stage(&s, widths[i], cfg.denoiser_blocks_per_stage)?,
            });
        }
        Ok(Self {
            intro: Conv2d::new(&vs.pp("intro"), 2 * cfg.lpr_channels, base, 3)?,
            middle: stage(
                &vs.pp("middle"),
                widths[depth - 1],
                cfg.denoiser_middle_blocks,
            )?,
            ending: Conv2d::new(&vs.pp("ending"), base, cfg.lpr_channels, 3)?,
            time,
            encoders,
            decoders,
            timesteps: cfg.timesteps,
            pad: cfg.denoiser_pad(),
        })
    }

    /// `eps_hat` for a batch with one timestep per sample.
    pub fn forward(&self, z_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        if z_t.dims() != cond.dims() {
            return Err(shape_err!(
                "z_t {:?} and condition {:?} differ",
                z_t.dims(),
                cond.dims()
            ));
        }
        let (n, _, h, w) = z_t.dims4()?;
        if t.len() != n {
            return Err(shape_err!("{} timesteps for a batch of {n}", t.len()));
        }
        if let Some(bad) = t.iter().find(|&&s| s == 0 || s > self.timesteps) {
            return Err(Error::Domain(format!(
                "timestep {bad} outside [1, {}]",
                self.timesteps
            )));
        }
        let temb = self.time.forward(t, z_t.dtype(), z_t.device())?;
        let ph = (self.pad - h % self.pad) % self.pad;
        let pw = (self.pad - w % self.pad) % self.pad;
        let x = Tensor::cat(&[z_t, cond], 1)?
            .pad_with_zeros(2, 0, ph)?
            .pad_with_zeros(3, 0, pw)?;
        let mut h_ = self.intro.forward(&x)?;
        let mut skips = Vec::new();
        for (blocks, down) in &self.encoders {
            for b in blocks {
                h_ = b.forward(&h_, &temb)?;
            }
            skips.push(h_.clone());
            h_ = down.forward(&h_)?;
        }
        for b in &self.middle {
            h_ = b.forward(&h_, &temb)?;
        }
        for stage in &self.decoders {
            h_ = (stage.up.forward(&ops::upsample_nearest(&h_, 2)?)? + skips.pop().unwrap())?;
            for b in &stage.blocks {
                h_ = b.forward(&h_, &temb)?;
            }
        }
        Ok(self.ending.forward(&h_)?.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

#[derive(Debug, Clone)]
enum Entry {
    Pim(Pim),
    Frm(Frm),
}

/// Reconstruction groups of `[PIM, FRM x n]` with a global residual. With the
/// prior disabled each PIM is replaced by an FRM.
#[derive(Debug, Clone)]
pub struct DhrNet {
    groups: Vec<(Entry, Vec<Frm>)>,
}

impl DhrNet {
    pub fn new(vs: &Scope, cfg: &LfDiffConfig) -> Result<Self> {
        let c = cfg.dhr_channels;
        let groups = cfg
            .blocks_per_group
            .iter()
            .zip(&cfg.heads)
            .enumerate()
            .map(|(i, (&n, &heads))| {
                let g = vs.pp(format!("group_{i}"));
                let s = g.pp("block_0");
                let entry = if cfg.use_prior {
                    Entry::Pim(Pim::new(
                        &s,
                        c,
                        cfg.lpr_channels,
                        cfg.ffn_expansion,
                        cfg.pim_pool,
                    )?)
                } else {
                    Entry::Frm(Frm::new(&s, c, heads, cfg.ffn_expansion, cfg.frm_pool)?)
                };
                let frms = (1..=n)
                    .map(|j| {
                        Frm::new(
                            &g.pp(format!("block_{j}")),
                            c,
                            heads,
                            cfg.ffn_expansion,
                            cfg.frm_pool,
                        )
                    })
                    .collect::<Result<_>>()?;
                Ok((entry, frms))
            })
            .collect::<Result<_>>()?;
        Ok(Self { groups })
    }

    /// `z` is ignored (and may be `None`) when the network was built without
    /// the prior.
    pub fn forward(&self, x: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        let mut h = x.clone();
        for (entry, frms) in &self.groups {
            h = match entry {
                Entry::Pim(p) => {
                    let z = z.ok_or_else(|| {
                        shape_err!("prior required by the reconstruction network")
                    })?;
                    p.forward(&h, z)?
                }
                Entry::Frm(f) => f.forward(&h)?,
            };
            for f in frms {
                h = f.forward(&h)?;
            }
        }
        Ok((h + x)?)
    }

    /// Forward pass with every PIM's cross-attention removed.
    pub fn forward_without_prior(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (entry, frms) in &self.groups {
            h = match entry {
                Entry::Pim(p) => p.forward_without_prior(&h)?,
                Entry::Frm(f) => f.forward(&h)?,
            };
            for f in frms {
                h = f.forward(&h)?;
            }
        }
        Ok((h + x)?)
    }
}
