//! The full network: alignment, prior extraction, latent diffusion and
//! reconstruction.
//!
//! Parameter names are hierarchical: `am/`, `lpenet/`, `dhrnet/group_i/block_j/`,
//! `head/`, and under `dm/` the diffusion branch (`dm/am/`, `dm/lpenet/`,
//! `dm/denoiser/`).

mod config;
mod nets;

pub use config::LfDiffConfig;
pub use nets::{Denoiser, DhrNet, Lpenet};

use candle_core::{DType, Device, Tensor, Var};

use crate::blocks::AlignmentModule;
use crate::data::{build_model_input, ExposureStack, HdrImage, ImageTensor};
use crate::diffusion::{ddim_sample, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ops, Conv2d, ParamStore};

/// Top-level parameter groups in reporting order.
pub const COMPONENTS: [(&str, &str); 7] = [
    ("alignment", "am/"),
    ("lpenet", "lpenet/"),
    ("dhrnet", "dhrnet/"),
    ("head", "head/"),
    ("dm_alignment", "dm/am/"),
    ("dm_lpenet", "dm/lpenet/"),
    ("denoiser", "dm/denoiser/"),
];

/// `[N, H, W, C]` images to an `[N, C, H, W]` tensor.
pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| shape_err!("empty image batch"))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dims() != (h, w, c) {
            return Err(shape_err!(
                "batch mixes {:?} and {:?}",
                (h, w, c),
                img.dims()
            ));
        }
        data.extend_from_slice(img.data());
    }
    let t = Tensor::from_vec(data, (images.len(), h, w, c), &Device::Cpu)?;
    Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = t.dims4()?;
    let hwc = t
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .to_dtype(DType::F32)?;
    let flat = hwc.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks(h * w * c)
        .take(n)
        .map(|chunk| ImageTensor::new(h, w, c, chunk.to_vec()))
        .collect()
}

/// A batch of exposure stacks as network tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Three `[N, 6, H, W]` inputs, LDR channels then gamma-linearized ones.
    pub frames: [Tensor; 3],
    /// `[N, 3, H, W]` when every stack carries ground truth.
    pub ground_truth: Option<Tensor>,
}

impl Batch {
    pub fn from_stacks(stacks: &[&ExposureStack], gamma: f32, dtype: DType) -> Result<Self> {
        let inputs = stacks
            .iter()
            .map(|s| build_model_input(s, gamma))
            .collect::<Result<Vec<_>>>()?;
        let frame =
            |i: usize| images_to_tensor(&inputs.iter().map(|x| &x[i]).collect::<Vec<_>>(), dtype);
        let gts: Option<Vec<&ImageTensor>> = stacks
            .iter()
            .map(|s| s.ground_truth().map(|g| g.pixels()))
            .collect();
        Ok(Self {
            frames: [frame(0)?, frame(1)?, frame(2)?],
            ground_truth: gts.map(|g| images_to_tensor(&g, dtype)).transpose()?,
        })
    }

    pub fn len(&self) -> usize {
        self.frames[0].dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-component parameter counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCounts {
    pub components: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCounts {
    pub fn get(&self, name: &str) -> Option<usize> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
    }
}

impl std::fmt::Display for ParamCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, count) in &self.components {
            writeln!(f, "{name:<14}{count:>10}")?;
        }
        write!(f, "{:<14}{:>10}", "total", self.total)
    }
}

#[derive(Debug, Clone)]
pub struct LfDiffModel {
    config: LfDiffConfig,
    store: ParamStore,
    schedule: NoiseSchedule,
    am: AlignmentModule,
    lpenet: Lpenet,
    dhrnet: DhrNet,
    head: Conv2d,
    dm_am: AlignmentModule,
    dm_lpenet: Lpenet,
    denoiser: Denoiser,
}

impl LfDiffModel {
    pub fn new(config: LfDiffConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let c = config.dhr_channels;
        let k2 = config.unshuffle_k * config.unshuffle_k;
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        let dm = root.pp("dm");
        let model = Self {
            am: AlignmentModule::new(&root.pp("am"), 6, c)?,
            lpenet: Lpenet::new(&root.pp("lpenet"), 6 * k2, &config)?,
            dhrnet: DhrNet::new(&root.pp("dhrnet"), &config)?,
            head: Conv2d::new(&root.pp("head"), c, 3, 3)?,
            dm_am: AlignmentModule::new(&dm.pp("am"), 6 * k2, config.lpenet_channels)?,
            dm_lpenet: Lpenet::new(&dm.pp("lpenet"), config.lpenet_channels, &config)?,
            denoiser: Denoiser::new(&dm.pp("denoiser"), &config)?,
            schedule,
            store,
            config,
        };
        log::debug!("denoiser parameters: {}", model.store.count("dm/denoiser/"));
        Ok(model)
    }

    pub fn config(&self) -> &LfDiffConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn param_count(&self) -> ParamCounts {
        let components: Vec<(String, usize)> = COMPONENTS
            .iter()
            .map(|(name, prefix)| (name.to_string(), self.store.count(prefix)))
            .collect();
        let total = self.store.count("");
        ParamCounts { components, total }
    }

    /// Variables whose names start with any of `prefixes`.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.store
            .vars()
            .into_iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .collect()
    }

    fn check_frames(&self, frames: &[Tensor; 3]) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = frames[0].dims4()?;
        if c != 6 || frames.iter().any(|f| f.dims() != frames[0].dims()) {
            return Err(shape_err!(
                "expected three equal [N, 6, H, W] inputs, got {:?}",
                frames.iter().map(|f| f.dims().to_vec()).collect::<Vec<_>>()
            ));
        }
        HdrImage::check_model_dims(h, w)?;
        Ok((n, h, w))
    }

    /// `LPENet(PixelUnshuffle(Concat(H, T(H))))` for `H: [N, 3, H, W]`.
    pub fn lpenet_forward(&self, gt: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = gt.dims4()?;
        let k = self.config.unshuffle_k;
        if c != 3 || h % k != 0 || w % k != 0 {
            return Err(shape_err!(
                "prior extractor needs [N, 3, H, W] with H, W divisible by {k}, got {:?}",
                gt.dims()
            ));
        }
        let x = Tensor::cat(&[gt, &ops::tonemap(gt, self.config.mu)?], 1)?;
        self.lpenet.forward(&ops::pixel_unshuffle(&x, k)?)
    }

    /// The denoiser's condition `D` from the three inputs.
    pub fn condition_extract(&self, frames: &[Tensor; 3]) -> Result<Tensor> {
        self.check_frames(frames)?;
        let k = self.config.unshuffle_k;
        let small = frames
            .iter()
            .map(|f| ops::pixel_unshuffle(f, k))
            .collect::<Result<Vec<_>>>()?;
        self.dm_lpenet.forward(&self.dm_am.forward(&small)?)
    }

    pub fn denoiser_forward(&self, z_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        let n = z_t.dim(0)?;
        self.denoiser.forward(z_t, cond, &vec![t; n])
    }

    pub fn denoiser_forward_batch(
        &self,
        z_t: &Tensor,
        cond: &Tensor,
        t: &[usize],
    ) -> Result<Tensor> {
        self.denoiser.forward(z_t, cond, t)
    }

    /// Aligned features `AM(X_1, X_2, X_3)`.
    pub fn align(&self, frames: &[Tensor; 3]) -> Result<Tensor> {
        self.check_frames(frames)?;
        self.am.forward(frames)
    }

    pub fn dhrnet_forward(&self, features: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        if self.config.use_prior {
            let z = z.ok_or_else(|| shape_err!("this model requires a prior"))?;
            let (n, _, h, w) = features.dims4()?;
            let k = self.config.pim_pool;
            let expect = [n, self.config.lpr_channels, h / k, w / k];
            if z.dims() != expect {
                return Err(shape_err!("prior {:?} should be {:?}", z.dims(), expect));
            }
            self.dhrnet.forward(features, Some(z))
        } else {
            self.dhrnet.forward(features, None)
        }
    }

    /// `clamp(Conv3x3(DHRNet(AM(X), z)), 0, 1)`.
    pub fn reconstruct(&self, frames: &[Tensor; 3], z: Option<&Tensor>) -> Result<Tensor> {
        let f = self.dhrnet_forward(&self.align(frames)?, z)?;
        ops::unit_clamp(&self.head.forward(&f)?)
    }

    /// Samples the prior with the implicit sampler from noise drawn with `seed`.
    pub fn sample_prior(&self, frames: &[Tensor; 3], steps: usize, seed: u64) -> Result<Tensor> {
        let cond = self.condition_extract(frames)?;
        ddim_sample(
            |z, d, t| self.denoiser_forward(z, d, t),
            &cond,
            steps,
            &self.schedule,
            seed,
        )
    }

    /// Full inference on a batch: sample the prior (when the model uses one)
    /// and reconstruct.
    pub fn infer_batch(&self, frames: &[Tensor; 3], steps: usize, seed: u64) -> Result<Tensor> {
        if self.config.use_prior {
            let z = self.sample_prior(frames, steps, seed)?;
            self.reconstruct(frames, Some(&z))
        } else {
            self.check_frames(frames)?;
            self.reconstruct(frames, None)
        }
    }

    pub fn infer(&self, stack: &ExposureStack, steps: usize, seed: u64) -> Result<HdrImage> {
        let batch = Batch::from_stacks(&[stack], self.config.gamma, self.dtype())?;
        let out = self.infer_batch(&batch.frames, steps, seed)?;
        let img = tensor_to_images(&out)?
            .pop()
            .ok_or_else(|| Error::Shape("empty inference output".into()))?;
        HdrImage::new(img)
    }
}
