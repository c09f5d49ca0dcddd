//! Two-stage optimization: stage one fits the prior extractor and the
//! reconstruction network on ground-truth priors; stage two trains the latent
//! diffusion branch jointly with the reconstruction network.

mod adam;
mod checkpoint;
mod config;
mod loss;

pub use adam::{clip_grad_norm, collect_grads, global_norm, Adam};
pub use checkpoint::{
    decode, encode, load_model, read_checkpoint, save_checkpoint, CheckpointData, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{lr_at, TrainConfig, UpdateMode};
pub use loss::{reconstruction_loss, FeatureExtractor, RandomConvPyramid, ReconstructionLoss};

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{list_scenes, load_scene, ExposureStack};
use crate::diffusion::{ddim_sample_from, gaussian};
use crate::error::{config_err, Error, Result};
use crate::model::{Batch, LfDiffModel};
use crate::nn::ops;

/// Parameters trained in stage one.
pub const STAGE1_PREFIXES: [&str; 4] = ["am/", "lpenet/", "dhrnet/", "head/"];
/// Parameters copied from the stage-one checkpoint into stage two.
pub const STAGE2_INHERITED: [&str; 4] = STAGE1_PREFIXES;
/// Parameters trained in stage two; the stage-one prior extractor is frozen.
pub const STAGE2_PREFIXES: [&str; 4] = ["am/", "dhrnet/", "head/", "dm/"];

/// Header of the loss CSV.
pub const LOSS_CSV_HEADER: &str = "step,epoch,l_pixel,l_percep,l_eps,l_prior,l_total,lr";

/// Losses of one optimizer step. Terms a stage does not use are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_pixel: f64,
    pub l_percep: f64,
    pub l_eps: f64,
    pub l_prior: f64,
    pub l_total: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step,
            self.epoch,
            self.l_pixel,
            self.l_percep,
            self.l_eps,
            self.l_prior,
            self.l_total,
            self.lr
        )
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            step: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            l_pixel: num(2)?,
            l_percep: num(3)?,
            l_eps: num(4)?,
            l_prior: num(5)?,
            l_total: num(6)?,
            lr: num(7)?,
        })
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

pub fn write_loss_csv(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(records)).map_err(|e| Error::io(path, e))
}

/// Scenes with ground truth, in name order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<(String, ExposureStack)>,
}

impl Dataset {
    pub fn new(scenes: Vec<(String, ExposureStack)>) -> Result<Self> {
        if let Some((name, _)) = scenes.iter().find(|(_, s)| s.ground_truth().is_none()) {
            return Err(Error::Data(format!("scene '{name}' has no ground truth")));
        }
        Ok(Self { scenes })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let scenes = list_scenes(dir.as_ref())?
            .into_iter()
            .map(|p| {
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((name, load_scene(&p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if scenes.is_empty() {
            return Err(Error::Data(format!(
                "no scenes under {}",
                dir.as_ref().display()
            )));
        }
        Self::new(scenes)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Mutable training progress; everything needed to resume exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub adam: Adam,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            global_step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            adam: Adam::default(),
            history: Vec::new(),
        }
    }
}

/// Owns a model and its optimizer state for one training stage.
pub struct Trainer {
    model: LfDiffModel,
    cfg: TrainConfig,
    state: TrainState,
    extractor: Box<dyn FeatureExtractor>,
    vars: Vec<(String, Var)>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    ops::scalar(t)
}

impl Trainer {
    /// Fresh run. Stage two copies the stage-one alignment, prior extractor,
    /// reconstruction network and head from `cfg.stage1_checkpoint`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: TrainConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let model = LfDiffModel::new(cfg.model.clone(), dtype, cfg.seed)?;
        if cfg.stage == 2 {
            let path = cfg.stage1_checkpoint.as_ref().expect("validated");
            let ckpt = read_checkpoint(path)?;
            if ckpt.model != cfg.model {
                return Err(Error::Checkpoint(format!(
                    "stage-one checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            ckpt.load_params(&model, &STAGE2_INHERITED)?;
        }
        let state = TrainState::new(cfg.seed);
        Self::assemble(model, cfg, state)
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let model = ckpt.build_model(DType::F32)?;
        let state = ckpt.train_state(DType::F32)?;
        Self::assemble(model, ckpt.train.clone(), state)
    }

    /// Resumes, replacing the stored training hyperparameters by `cfg`
    /// (for instance to extend `epochs`). The model must match.
    pub fn resume_with(path: impl AsRef<Path>, cfg: TrainConfig) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        if ckpt.model != cfg.model {
            return Err(Error::Checkpoint(
                "checkpoint model differs from the configured model".into(),
            ));
        }
        cfg.validate()?;
        let model = ckpt.build_model(DType::F32)?;
        let state = ckpt.train_state(DType::F32)?;
        Self::assemble(model, cfg, state)
    }

    fn assemble(model: LfDiffModel, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        let prefixes: &[&str] = if cfg.stage == 1 {
            &STAGE1_PREFIXES
        } else {
            &STAGE2_PREFIXES
        };
        let vars = model.vars_with_prefixes(prefixes);
        let extractor = Box::new(RandomConvPyramid::new(cfg.perceptual_seed, model.dtype())?);
        Ok(Self {
            model,
            cfg,
            state,
            extractor,
            vars,
        })
    }

    /// Swaps the perceptual feature extractor.
    pub fn set_extractor(&mut self, extractor: Box<dyn FeatureExtractor>) {
        self.extractor = extractor;
    }

    pub fn model(&self) -> &LfDiffModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Names of the parameters this stage updates.
    pub fn trainable(&self) -> Vec<String> {
        self.vars.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, &self.cfg, &self.state)
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.state.epoch, &self.cfg)
    }

    fn update(&mut self, loss: &Tensor, prefixes: Option<&[&str]>) -> Result<()> {
        let grads = loss.backward()?;
        let vars: Vec<(String, Var)> = match prefixes {
            Some(p) => self
                .vars
                .iter()
                .filter(|(n, _)| p.iter().any(|x| n.starts_with(x)))
                .cloned()
                .collect(),
            None => self.vars.clone(),
        };
        let mut g = collect_grads(&vars, &grads);
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut g, self.cfg.grad_clip)?;
        }
        let lr = self.lr();
        self.state.adam.step(&vars, &g, lr)
    }

    fn record(
        &mut self,
        l_pixel: f64,
        l_percep: f64,
        l_eps: f64,
        l_prior: f64,
        l_total: f64,
    ) -> LossRecord {
        let r = LossRecord {
            step: self.state.global_step,
            epoch: self.state.epoch,
            l_pixel,
            l_percep,
            l_eps,
            l_prior,
            l_total,
            lr: self.lr(),
        };
        self.state.global_step += 1;
        self.state.history.push(r);
        r
    }

    fn recon(&self, gt: &Tensor, out: &Tensor) -> Result<ReconstructionLoss> {
        reconstruction_loss(
            gt,
            out,
            self.cfg.lambda,
            self.model.config().mu,
            self.extractor.as_ref(),
        )
    }

    fn ground_truth(batch: &Batch) -> Result<&Tensor> {
        batch
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Data("training batch without ground truth".into()))
    }

    /// Reconstruction with the prior extracted from ground truth; updates the
    /// alignment module, prior extractor, reconstruction network and head.
    pub fn stage1_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let gt = Self::ground_truth(batch)?;
        let out = if self.model.config().use_prior {
            let z = self.model.lpenet_forward(gt)?;
            self.model.reconstruct(&batch.frames, Some(&z))?
        } else {
            self.model.reconstruct(&batch.frames, None)?
        };
        let l = self.recon(gt, &out)?;
        self.update(&l.total, None)?;
        let (p, q, t) = (scalar(&l.pixel)?, scalar(&l.perceptual)?, scalar(&l.total)?);
        Ok(self.record(p, q, 0.0, 0.0, t))
    }

    /// The S-step implicit sampler from `z_T`, differentiable end to end.
    fn rollout(&self, cond: &Tensor, z_start: Tensor) -> Result<Tensor> {
        let m = &self.model;
        ddim_sample_from(
            |z, d, t| m.denoiser_forward(z, d, t),
            cond,
            z_start,
            m.config().sampling_steps,
            m.schedule(),
        )
    }

    /// Noise-prediction loss at a random timestep per sample.
    fn eps_term(&mut self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let n = z.dim(0)?;
        let total = self.model.config().timesteps;
        let ts: Vec<usize> = (0..n)
            .map(|_| self.state.rng.random_range(1..=total))
            .collect();
        let eps = gaussian(z.dims(), z.dtype(), &mut self.state.rng)?;
        let s = self.model.schedule();
        let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for &t in &ts {
            let ab = s.alpha_bar(t)?;
            a.push(ab.sqrt());
            b.push((1.0 - ab).sqrt());
        }
        let col = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (n, 1, 1, 1), z.device())?.to_dtype(z.dtype())?)
        };
        let z_t = (z.broadcast_mul(&col(a)?)? + eps.broadcast_mul(&col(b)?)?)?;
        let eps_hat = self.model.denoiser_forward_batch(&z_t, cond, &ts)?;
        ops::mse(&eps, &eps_hat)
    }

    /// Joint diffusion step: noise loss, prior loss after a full sampler
    /// rollout, and reconstruction loss on the image built from the sampled
    /// prior. The stage-one prior extractor only provides targets.
    pub fn stage2_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let gt = Self::ground_truth(batch)?;
        let z = self.model.lpenet_forward(gt)?.detach();
        match self.cfg.update_mode {
            UpdateMode::Combined => {
                let cond = self.model.condition_extract(&batch.frames)?;
                let l_eps = self.eps_term(&z, &cond)?;
                let z_start = gaussian(z.dims(), z.dtype(), &mut self.state.rng)?;
                let z_hat = self.rollout(&cond, z_start)?;
                let l_prior = ops::l1(&z_hat, &z)?;
                let out = self.model.reconstruct(&batch.frames, Some(&z_hat))?;
                let l_r = self.recon(gt, &out)?;
                let total = ((&l_eps + &l_prior)? + &l_r.total)?;
                self.update(&total, None)?;
                let rec = (
                    scalar(&l_r.pixel)?,
                    scalar(&l_r.perceptual)?,
                    scalar(&l_eps)?,
                    scalar(&l_prior)?,
                    scalar(&total)?,
                );
                Ok(self.record(rec.0, rec.1, rec.2, rec.3, rec.4))
            }
            UpdateMode::Sequential => {
                let cond = self.model.condition_extract(&batch.frames)?;
                let l_eps = self.eps_term(&z, &cond)?;
                self.update(&l_eps, Some(&["dm/"]))?;
                let z_start = gaussian(z.dims(), z.dtype(), &mut self.state.rng)?;
                let cond = self.model.condition_extract(&batch.frames)?;
                let z_hat = self.rollout(&cond, z_start.clone())?;
                let l_prior = ops::l1(&z_hat, &z)?;
                self.update(&l_prior, Some(&["dm/"]))?;
                let cond = self.model.condition_extract(&batch.frames)?;
                let z_hat = self.rollout(&cond, z_start)?;
                let out = self.model.reconstruct(&batch.frames, Some(&z_hat))?;
                let l_r = self.recon(gt, &out)?;
                self.update(&l_r.total, None)?;
                let (e, p, r) = (scalar(&l_eps)?, scalar(&l_prior)?, scalar(&l_r.total)?);
                Ok(self.record(
                    scalar(&l_r.pixel)?,
                    scalar(&l_r.perceptual)?,
                    e,
                    p,
                    e + p + r,
                ))
            }
        }
    }

    pub fn step(&mut self, batch: &Batch) -> Result<LossRecord> {
        if self.cfg.stage == 1 {
            self.stage1_step(batch)
        } else {
            self.stage2_step(batch)
        }
    }

    /// Shuffles the dataset with the run's generator, crops every scene to a
    /// random `patch_size` window and groups scenes into batches.
    pub fn epoch_batches(&mut self, data: &Dataset) -> Result<Vec<Batch>> {
        let p = self.cfg.patch_size;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.state.rng);
        let mut crops = Vec::with_capacity(order.len());
        for &i in &order {
            let (name, s) = &data.scenes[i];
            if s.height() < p || s.width() < p {
                return Err(config_err!(
                    "scene '{name}' ({}x{}) is smaller than patch_size {p}",
                    s.height(),
                    s.width()
                ));
            }
            let y = self.state.rng.random_range(0..=s.height() - p);
            let x = self.state.rng.random_range(0..=s.width() - p);
            crops.push(s.crop(y, x, p, p)?);
        }
        crops
            .chunks(self.cfg.batch_size)
            .map(|c| {
                Batch::from_stacks(
                    &c.iter().collect::<Vec<_>>(),
                    self.model.config().gamma,
                    self.model.dtype(),
                )
            })
            .collect()
    }

    /// One pass over `data`.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<Vec<LossRecord>> {
        let batches = self.epoch_batches(data)?;
        let records = batches
            .iter()
            .map(|b| self.step(b))
            .collect::<Result<Vec<_>>>()?;
        self.state.epoch += 1;
        Ok(records)
    }

    /// Trains until `cfg.epochs` epochs have completed. `on_epoch` runs after
    /// every epoch and may save checkpoints or log.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &[LossRecord]) -> Result<()>,
    ) -> Result<()> {
        while self.state.epoch < self.cfg.epochs {
            let records = self.train_epoch(data)?;
            on_epoch(self, &records)?;
        }
        Ok(())
    }
}
