use super::{ExposureStack, ImageTensor, LdrImage};
use crate::error::{shape_err, Error, Result};

/// μ of the μ-law tonemapper.
pub const DEFAULT_MU: f64 = 5000.0;
/// Camera response exponent used to linearize LDR frames.
pub const DEFAULT_GAMMA: f32 = 2.2;

/// `log(1 + μx) / log(1 + μ)` for a single value.
pub fn tonemap_value(x: f64, mu: f64) -> f64 {
    (mu * x).ln_1p() / mu.ln_1p()
}

/// μ-law tonemapping applied elementwise.
pub fn tonemap(img: &ImageTensor, mu: f64) -> Result<ImageTensor> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Domain(format!(
            "tonemap mu must be positive, got {mu}"
        )));
    }
    if let Some(v) = img.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Domain(format!(
            "tonemap input {v} is negative or non-finite"
        )));
    }
    Ok(img.map(|v| tonemap_value(v as f64, mu) as f32))
}

/// Linearizes an LDR frame: `clip(L^γ / 2^ev, 0, 1)`.
pub fn gamma_to_hdr(ldr: &LdrImage, gamma: f32) -> Result<ImageTensor> {
    let t = ldr.exposure_time();
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("exposure time {t} must be positive")));
    }
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma {gamma} must be positive")));
    }
    Ok(ldr
        .pixels()
        .map(|v| ((v as f64).powf(gamma as f64) / t as f64).clamp(0.0, 1.0) as f32))
}

/// Builds the three six-channel inputs `X_i = [L_i, H_i]` (LDR channels first).
pub fn build_model_input(stack: &ExposureStack, gamma: f32) -> Result<[ImageTensor; 3]> {
    let make = |f: &LdrImage| -> Result<ImageTensor> {
        let h = gamma_to_hdr(f, gamma)?;
        ImageTensor::concat_channels(&[f.pixels(), &h])
    };
    let [a, b, c] = stack.frames();
    Ok([make(a)?, make(b)?, make(c)?])
}

/// Space-to-depth rearrangement.
///
/// Output channel `(dy * k + dx) * C + c` at `(y, x)` holds input
/// `(y * k + dy, x * k + dx, c)`: sub-pixel offsets are row-major within each
/// `k x k` block and stacked ahead of the original channel index.
pub fn pixel_unshuffle(img: &ImageTensor, k: usize) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err!("pixel_unshuffle: {h}x{w} not divisible by {k}"));
    }
    let (oh, ow, oc) = (h / k, w / k, c * k * k);
    Ok(ImageTensor::from_fn(oh, ow, oc, |y, x, ch| {
        let (block, cc) = (ch / c, ch % c);
        img.get(y * k + block / k, x * k + block % k, cc)
    }))
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(img: &ImageTensor, k: usize) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    if k == 0 || c % (k * k) != 0 {
        return Err(shape_err!(
            "pixel_shuffle: {c} channels not divisible by {}",
            k * k
        ));
    }
    let oc = c / (k * k);
    Ok(ImageTensor::from_fn(h * k, w * k, oc, |y, x, cc| {
        let block = (y % k) * k + x % k;
        img.get(y / k, x / k, block * oc + cc)
    }))
}
