use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::nn::{conv2d, ops};

/// Produces the feature maps compared by the perceptual term.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, img: &Tensor) -> Result<Vec<Tensor>>;
}

/// Fixed, untrained pyramid: three stages of `conv3x3 -> ReLU -> avgpool 2`
/// with seeded Kaiming-uniform weights.
#[derive(Debug, Clone)]
pub struct RandomConvPyramid {
    stages: Vec<(Tensor, Tensor)>,
}

impl RandomConvPyramid {
    pub const WIDTHS: [usize; 4] = [3, 16, 32, 64];

    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = Self::WIDTHS
            .windows(2)
            .map(|w| {
                let (ci, co) = (w[0], w[1]);
                let bound = (6.0 / (ci * 9) as f64).sqrt();
                let data: Vec<f64> = (0..co * ci * 9)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-0.1..0.1)).collect();
                Ok((
                    Tensor::from_vec(data, (co, ci, 3, 3), &Device::Cpu)?.to_dtype(dtype)?,
                    Tensor::from_vec(bias, (1, co, 1, 1), &Device::Cpu)?.to_dtype(dtype)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn features(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = img.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let w = w.to_dtype(img.dtype())?;
            let b = b.to_dtype(img.dtype())?;
            h = ops::avg_pool(&conv2d(&h, &w, 1, 1)?.broadcast_add(&b)?.relu()?, 2)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// The three scalars of the reconstruction objective.
#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    pub total: Tensor,
    pub pixel: Tensor,
    pub perceptual: Tensor,
}

/// `mean|T(H) - T(H_hat)| + lambda * mean over levels of mean|phi(T(H)) - phi(T(H_hat))|`.
pub fn reconstruction_loss(
    h: &Tensor,
    h_hat: &Tensor,
    lambda: f64,
    mu: f64,
    extractor: &dyn FeatureExtractor,
) -> Result<ReconstructionLoss> {
    if h.dims() != h_hat.dims() {
        return Err(shape_err!(
            "reconstruction loss: {:?} vs {:?}",
            h.dims(),
            h_hat.dims()
        ));
    }
    let th = ops::tonemap(h, mu)?;
    let th_hat = ops::tonemap(h_hat, mu)?;
    let pixel = ops::l1(&th, &th_hat)?;
    let fa = extractor.features(&th)?;
    let fb = extractor.features(&th_hat)?;
    let mut perceptual = Tensor::zeros((), h.dtype(), h.device())?;
    for (a, b) in fa.iter().zip(&fb) {
        perceptual = (perceptual + ops::l1(a, b)?)?;
    }
    let perceptual = (perceptual / fa.len().max(1) as f64)?;
    let total = (&pixel + perceptual.affine(lambda, 0.0)?)?;
    Ok(ReconstructionLoss {
        total,
        pixel,
        perceptual,
    })
}
