use std::fmt::Write as _;

use crate::error::{config_err, Error, Result};

/// Architecture and diffusion hyperparameters.
///
/// `Default` gives the full-size network; [`LfDiffConfig::desk`] a reduced
/// variant that trains in minutes on one CPU core.
#[derive(Debug, Clone, PartialEq)]
pub struct LfDiffConfig {
    pub dhr_channels: usize,
    /// Number of FRMs following the PIM in each reconstruction group.
    pub blocks_per_group: Vec<usize>,
    pub heads: Vec<usize>,
    pub ffn_expansion: f64,
    pub pim_pool: usize,
    pub frm_pool: usize,
    pub lpenet_channels: usize,
    pub lpenet_blocks: usize,
    pub unshuffle_k: usize,
    pub lpr_channels: usize,
    pub denoiser_base_channels: usize,
    pub denoiser_multipliers: Vec<usize>,
    pub denoiser_blocks_per_stage: usize,
    pub denoiser_middle_blocks: usize,
    pub timesteps: usize,
    pub sampling_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mu: f64,
    pub gamma: f32,
    /// When false every PIM is replaced by an FRM and the prior is ignored.
    pub use_prior: bool,
}

impl Default for LfDiffConfig {
    fn default() -> Self {
        Self {
            dhr_channels: 60,
            blocks_per_group: vec![3, 3, 3],
            heads: vec![6, 6, 6],
            ffn_expansion: 2.66,
            pim_pool: 4,
            frm_pool: 2,
            lpenet_channels: 64,
            lpenet_blocks: 4,
            unshuffle_k: 4,
            lpr_channels: 3,
            denoiser_base_channels: 32,
            denoiser_multipliers: vec![1, 2, 4, 8],
            denoiser_blocks_per_stage: 2,
            denoiser_middle_blocks: 1,
            timesteps: 200,
            sampling_steps: 10,
            beta_start: 1e-4,
            beta_end: 2e-2,
            mu: crate::data::DEFAULT_MU,
            gamma: crate::data::DEFAULT_GAMMA,
            use_prior: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err!("invalid value '{value}' for '{key}'"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl LfDiffConfig {
    /// Reduced widths and depths for single-core training runs.
    pub fn desk() -> Self {
        Self {
            dhr_channels: 16,
            blocks_per_group: vec![1, 1],
            heads: vec![2, 2],
            lpenet_channels: 16,
            lpenet_blocks: 2,
            denoiser_base_channels: 16,
            denoiser_multipliers: vec![1, 2, 4],
            denoiser_blocks_per_stage: 1,
            ..Self::default()
        }
    }

    /// Looks up a preset by name (`paper` or `desk`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" | "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            _ => Err(config_err!("unknown model preset '{name}'")),
        }
    }

    pub fn groups(&self) -> usize {
        self.blocks_per_group.len()
    }

    /// Spatial multiple the latent is padded to inside the denoiser.
    pub fn denoiser_pad(&self) -> usize {
        1 << (self.denoiser_multipliers.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dhr_channels", self.dhr_channels),
            ("pim_pool", self.pim_pool),
            ("frm_pool", self.frm_pool),
            ("lpenet_channels", self.lpenet_channels),
            ("unshuffle_k", self.unshuffle_k),
            ("lpr_channels", self.lpr_channels),
            ("denoiser_base_channels", self.denoiser_base_channels),
            ("timesteps", self.timesteps),
            ("sampling_steps", self.sampling_steps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(config_err!("{k} must be positive"));
            }
        }
        if self.blocks_per_group.is_empty() || self.heads.len() != self.blocks_per_group.len() {
            return Err(config_err!(
                "heads ({}) must list one entry per group ({})",
                self.heads.len(),
                self.blocks_per_group.len()
            ));
        }
        if let Some(h) = self
            .heads
            .iter()
            .find(|&&h| h == 0 || self.dhr_channels % h != 0)
        {
            return Err(config_err!(
                "dhr_channels {} not divisible by {h} heads",
                self.dhr_channels
            ));
        }
        if self.denoiser_multipliers.is_empty() || self.denoiser_multipliers.contains(&0) {
            return Err(config_err!(
                "denoiser_multipliers must be non-empty and positive"
            ));
        }
        if self.pim_pool != self.unshuffle_k {
            return Err(config_err!(
                "pim_pool ({}) must equal unshuffle_k ({}) so the prior matches the pooled features",
                self.pim_pool,
                self.unshuffle_k
            ));
        }
        if !(self.ffn_expansion > 0.0 && self.mu > 0.0 && self.gamma > 0.0) {
            return Err(config_err!("ffn_expansion, mu and gamma must be positive"));
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(config_err!("need 0 < beta_start < beta_end < 1"));
        }
        if self.timesteps % self.sampling_steps != 0 {
            return Err(config_err!(
                "sampling_steps {} must divide timesteps {}",
                self.sampling_steps,
                self.timesteps
            ));
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// that are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "preset" => *self = Self::preset(value.trim())?,
            "dhr_channels" => self.dhr_channels = parse(key, value)?,
            "blocks_per_group" => self.blocks_per_group = parse_list(key, value)?,
            "heads" => self.heads = parse_list(key, value)?,
            "ffn_expansion" => self.ffn_expansion = parse(key, value)?,
            "pim_pool" => self.pim_pool = parse(key, value)?,
            "frm_pool" => self.frm_pool = parse(key, value)?,
            "lpenet_channels" => self.lpenet_channels = parse(key, value)?,
            "lpenet_blocks" => self.lpenet_blocks = parse(key, value)?,
            "unshuffle_k" => self.unshuffle_k = parse(key, value)?,
            "lpr_channels" => self.lpr_channels = parse(key, value)?,
            "denoiser_base_channels" => self.denoiser_base_channels = parse(key, value)?,
            "denoiser_multipliers" => self.denoiser_multipliers = parse_list(key, value)?,
            "denoiser_blocks_per_stage" => self.denoiser_blocks_per_stage = parse(key, value)?,
            "denoiser_middle_blocks" => self.denoiser_middle_blocks = parse(key, value)?,
            "timesteps" => self.timesteps = parse(key, value)?,
            "sampling_steps" => self.sampling_steps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "use_prior" => self.use_prior = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines accepted back by [`LfDiffConfig::set`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("dhr_channels", self.dhr_channels.to_string());
        line("blocks_per_group", join(&self.blocks_per_group));
        line("heads", join(&self.heads));
        line("ffn_expansion", format!("{:?}", self.ffn_expansion));
        line("pim_pool", self.pim_pool.to_string());
        line("frm_pool", self.frm_pool.to_string());
        line("lpenet_channels", self.lpenet_channels.to_string());
        line("lpenet_blocks", self.lpenet_blocks.to_string());
        line("unshuffle_k", self.unshuffle_k.to_string());
        line("lpr_channels", self.lpr_channels.to_string());
        line(
            "denoiser_base_channels",
            self.denoiser_base_channels.to_string(),
        );
        line("denoiser_multipliers", join(&self.denoiser_multipliers));
        line(
            "denoiser_blocks_per_stage",
            self.denoiser_blocks_per_stage.to_string(),
        );
        line(
            "denoiser_middle_blocks",
            self.denoiser_middle_blocks.to_string(),
        );
        line("timesteps", self.timesteps.to_string());
        line("sampling_steps", self.sampling_steps.to_string());
        line("beta_start", format!("{:?}", self.beta_start));
        line("beta_end", format!("{:?}", self.beta_end));
        line("mu", format!("{:?}", self.mu));
        line("gamma", format!("{:?}", self.gamma));
        line("use_prior", self.use_prior.to_string());
        s
    }

    /// Parses the output of [`LfDiffConfig::to_text`]; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in crate::kv::pairs(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown model key '{key}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        for cfg in [LfDiffConfig::default(), LfDiffConfig::desk()] {
            cfg.validate().unwrap();
            assert_eq!(LfDiffConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
        let d = LfDiffConfig::default();
        assert_eq!(
            (d.dhr_channels, d.timesteps, d.sampling_steps),
            (60, 200, 10)
        );
        assert_eq!(d.denoiser_multipliers, vec![1, 2, 4, 8]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = LfDiffConfig::default();
        c.heads = vec![7, 6, 6];
        assert!(c.validate().is_err());
        let mut c = LfDiffConfig::default();
        c.sampling_steps = 7;
        assert!(c.validate().is_err());
        assert!(LfDiffConfig::from_text("bogus = 1").is_err());
        assert!(LfDiffConfig::from_text("dhr_channels = x").is_err());
    }
}
