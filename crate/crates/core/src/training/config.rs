use std::path::{Path, PathBuf};

use crate::error::{config_err, Error, Result};
use crate::model::LfDiffConfig;

/// How stage two applies its three losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// One backward pass over the summed losses.
    Combined,
    /// Three consecutive updates: noise loss, prior loss, reconstruction loss.
    Sequential,
}

/// Training hyperparameters plus the model architecture.
///
/// Read from flat `key = value` text; keys are the field names below and
/// every [`LfDiffConfig`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub update_mode: UpdateMode,
    pub perceptual_seed: u64,
    pub stage1_checkpoint: Option<PathBuf>,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub model: LfDiffConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr0: 1e-4,
            lr_decay: 0.1,
            lr_decay_epochs: 50,
            batch_size: 4,
            patch_size: 64,
            epochs: 10,
            lambda: 1e-2,
            seed: 0,
            grad_clip: 0.0,
            update_mode: UpdateMode::Combined,
            perceptual_seed: 7,
            stage1_checkpoint: None,
            checkpoint_every: 0,
            model: LfDiffConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err!("invalid value '{value}' for '{key}'"))
}

impl TrainConfig {
    /// Stage-two defaults: gradient clipping at norm 1.
    pub fn stage2() -> Self {
        Self {
            stage: 2,
            grad_clip: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(config_err!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.lambda >= 0.0 && self.grad_clip >= 0.0) {
            return Err(config_err!(
                "lr0 and lr_decay must be positive, lambda and grad_clip non-negative"
            ));
        }
        if self.lr_decay_epochs == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err!(
                "lr_decay_epochs, batch_size and epochs must be positive"
            ));
        }
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return Err(config_err!("patch_size must be a positive multiple of 8"));
        }
        if self.stage == 2 {
            if self.stage1_checkpoint.is_none() {
                return Err(config_err!("stage 2 requires stage1_checkpoint"));
            }
            if !self.model.use_prior {
                return Err(config_err!(
                    "stage 2 requires a model with the prior enabled"
                ));
            }
        }
        self.model.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stage" => self.stage = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "perceptual_seed" => self.perceptual_seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "update_mode" => {
                self.update_mode = match value {
                    "combined" => UpdateMode::Combined,
                    "sequential" => UpdateMode::Sequential,
                    _ => return Err(config_err!("update_mode must be combined or sequential")),
                }
            }
            "stage1_checkpoint" => {
                self.stage1_checkpoint = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            _ => {
                if !self.model.set(key, value)? {
                    return Err(config_err!("unknown config key '{key}'"));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` text on top of the defaults for the stage named
    /// in the text (stage-two defaults when `stage = 2` appears).
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = crate::kv::pairs(text)?;
        let stage2 = pairs.iter().any(|(k, v)| k == "stage" && v == "2");
        let mut cfg = if stage2 {
            Self::stage2()
        } else {
            Self::default()
        };
        // the preset replaces the whole model, so it must come first
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Serialized training fields (the model is written separately).
    pub fn to_text(&self) -> String {
        let mode = match self.update_mode {
            UpdateMode::Combined => "combined",
            UpdateMode::Sequential => "sequential",
        };
        let ckpt = self
            .stage1_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        format!(
            "stage = {}\nlr0 = {:?}\nlr_decay = {:?}\nlr_decay_epochs = {}\nbatch_size = {}\n\
             patch_size = {}\nepochs = {}\nlambda = {:?}\nseed = {}\ngrad_clip = {:?}\n\
             update_mode = {mode}\nperceptual_seed = {}\ncheckpoint_every = {}\nstage1_checkpoint = {ckpt}\n",
            self.stage,
            self.lr0,
            self.lr_decay,
            self.lr_decay_epochs,
            self.batch_size,
            self.patch_size,
            self.epochs,
            self.lambda,
            self.seed,
            self.grad_clip,
            self.perceptual_seed,
            self.checkpoint_every,
        )
    }
}

/// Step decay: `lr0 * lr_decay^floor(epoch / lr_decay_epochs)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_epochs) as i32)
}
