use crate::data::{tonemap, ImageTensor, DEFAULT_MU};
use crate::error::{shape_err, Result};

/// Upper bound reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!(
            "metric inputs differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at `cap`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, cap: f64) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(cap);
    }
    Ok((-10.0 * mse.log10()).min(cap))
}

/// PSNR after μ-law tonemapping both images.
pub fn psnr_mu(h: &ImageTensor, h_hat: &ImageTensor) -> Result<f64> {
    psnr(
        &tonemap(h, DEFAULT_MU)?,
        &tonemap(h_hat, DEFAULT_MU)?,
        PSNR_CAP,
    )
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one channel plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean structural similarity with an 11-tap Gaussian window (σ = 1.5),
/// `C1 = 0.01²`, `C2 = 0.03²`, averaged over valid positions and channels.
/// Images smaller than the window use a window as large as the image.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let (h, w, ch) = a.dims();
    let size = 11.min(h).min(w);
    let g = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * ch + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * ch + c] as f64).collect();
        let prod =
            |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let (ma, ho, wo) = filter(&pa, h, w, &g);
        let (mb, _, _) = filter(&pb, h, w, &g);
        let (saa, _, _) = filter(&prod(&pa, &pa), h, w, &g);
        let (sbb, _, _) = filter(&prod(&pb, &pb), h, w, &g);
        let (sab, _, _) = filter(&prod(&pa, &pb), h, w, &g);
        for i in 0..ho * wo {
            let (mu_a, mu_b) = (ma[i], mb[i]);
            let va = saa[i] - mu_a * mu_a;
            let vb = sbb[i] - mu_b * mu_b;
            let cov = sab[i] - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
        }
        count += ho * wo;
    }
    Ok(total / count as f64)
}

/// SSIM after μ-law tonemapping.
pub fn ssim_mu(h: &ImageTensor, h_hat: &ImageTensor) -> Result<f64> {
    ssim(&tonemap(h, DEFAULT_MU)?, &tonemap(h_hat, DEFAULT_MU)?)
}
