//! Variance schedule, closed-form forward process, reverse steps and the
//! deterministic implicit sampler used for the low-frequency prior.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::ops;

/// `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t = prod_{i<=t} alpha_i`
/// for `t = 1..=T`.
///
/// Storage is 0-based; the accessors take the 1-based step index, and
/// `alpha_bar(0)` is defined as exactly 1 so that `t_next = 0` is a valid
/// terminal step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 2e-2;

    /// Linear `beta` from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err!("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err!(
                "invalid beta bounds: need 0 < {beta_start} <= {beta_end} < 1"
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// A latent together with its diffusion step.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z0, eps, "q_sample")?;
    let ab = s.alpha_bar(s.check(t)? + 1)?;
    Ok((z0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// `(z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn predict_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z_t, eps_hat, "predict_z0")?;
    let ab = s.alpha_bar(s.check(t)? + 1)?;
    let num = (z_t - eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(num.affine(1.0 / ab.sqrt(), 0.0)?)
}

/// Deterministic implicit step from `t` to `t_next < t`.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_next: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_next {
        return Err(Error::SamplerOrder { t, t_next });
    }
    let z0 = predict_z0(z_t, eps_hat, t, s)?;
    let ab_next = s.alpha_bar(t_next)?;
    if t_next == 0 {
        return Ok(z0);
    }
    Ok((z0.affine(ab_next.sqrt(), 0.0)? + eps_hat.affine((1.0 - ab_next).sqrt(), 0.0)?)?)
}

/// Ancestral step
/// `z_{t-1} = (z_t - (1 - a_t) / sqrt(1 - ab_t) eps_hat) / sqrt(a_t) + sqrt(1 - a_t) noise`.
pub fn ddpm_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    same_shape(z_t, eps_hat, "ddpm_step")?;
    same_shape(z_t, noise, "ddpm_step noise")?;
    let a = s.alpha(t)?;
    let ab = s.alpha_bar(t)?;
    let mean =
        (z_t - eps_hat.affine((1.0 - a) / (1.0 - ab).sqrt(), 0.0)?)?.affine(1.0 / a.sqrt(), 0.0)?;
    Ok((mean + noise.affine((1.0 - a).sqrt(), 0.0)?)?)
}

/// The `(t, t_next)` pairs visited by the implicit sampler:
/// `t = (i - 1) T / S + 1`, `t_next = (i - 2) T / S + 1` (or 0 when `i = 1`)
/// for `i = S, ..., 1`.
pub fn sampling_grid(total: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || total % steps != 0 {
        return Err(config_err!(
            "sampling steps S={steps} must divide the diffusion length T={total}"
        ));
    }
    let stride = total / steps;
    Ok((1..=steps)
        .rev()
        .map(|i| {
            let t = (i - 1) * stride + 1;
            let t_next = if i > 1 { (i - 2) * stride + 1 } else { 0 };
            (t, t_next)
        })
        .collect())
}

/// Standard-normal tensor from a seeded generator.
pub fn gaussian(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Runs the implicit sampler from a given `z_T`.
///
/// `denoiser(z_t, cond, t)` predicts the injected noise. The chain is built
/// from ordinary tensor ops, so gradients flow through every step.
pub fn ddim_sample_from<F>(
    mut denoiser: F,
    cond: &Tensor,
    z_start: Tensor,
    steps: usize,
    s: &NoiseSchedule,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    let mut z = z_start;
    for (t, t_next) in sampling_grid(s.steps(), steps)? {
        let eps = denoiser(&z, cond, t)?;
        z = ddim_step(&z, &eps, t, t_next, s)?;
    }
    Ok(z)
}

/// Samples `z_T ~ N(0, I)` shaped like `cond` from `seed`, then runs
/// [`ddim_sample_from`].
pub fn ddim_sample<F>(
    denoiser: F,
    cond: &Tensor,
    steps: usize,
    s: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    sampling_grid(s.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_start = gaussian(cond.dims(), cond.dtype(), &mut rng)?;
    ddim_sample_from(denoiser, cond, z_start, steps, s)
}

/// Mean squared noise-prediction error.
pub fn eps_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape(eps, eps_hat, "eps_loss")?;
    ops::mse(eps, eps_hat)
}

/// Both terms of the diffusion objective and their sum.
#[derive(Debug, Clone)]
pub struct DiffusionLoss {
    pub eps: Tensor,
    pub prior: Tensor,
    pub total: Tensor,
}

/// `mean((eps - eps_hat)^2) + mean(|z_hat - z|)`.
pub fn diffusion_loss(
    eps: &Tensor,
    eps_hat: &Tensor,
    z: &Tensor,
    z_hat: &Tensor,
) -> Result<DiffusionLoss> {
    same_shape(z, z_hat, "diffusion_loss")?;
    let eps = eps_loss(eps, eps_hat)?;
    let prior = ops::l1(z_hat, z)?;
    let total = (&eps + &prior)?;
    Ok(DiffusionLoss { eps, prior, total })
}
