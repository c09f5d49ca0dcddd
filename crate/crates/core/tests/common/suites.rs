use candle_core::{DType, Device, Tensor};
use lfdiff::blocks::{
    frequency_split, CrossAttention, GatedFfn, LowFrequencyTransformer, NafBlock, Pim,
    ResidualBlock, TimeEmbedding, TransposedSelfAttention,
};
use lfdiff::data::{
    pixel_shuffle, pixel_unshuffle, read_hdr_raw, tonemap_value, write_hdr_raw, HdrImage,
    ImageTensor,
};
use lfdiff::diffusion::{ddim_sample_from, q_sample, NoiseSchedule};
use lfdiff::eval::{psnr, ssim, PSNR_CAP};
use lfdiff::model::{DhrNet, LfDiffConfig};
use lfdiff::nn::{ops, ParamStore};
use lfdiff::Result;

use super::uniform;

/// Outcome of one named check.
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ok,
            detail: detail.into(),
        }
    }

    fn from(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, d)) => Self::new(name, ok, d),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

fn image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
    let t = uniform(&[h * w * c], 0.0, 1.0, seed);
    let v: Vec<f32> = t.to_dtype(DType::F32).unwrap().to_vec1().unwrap();
    ImageTensor::new(h, w, c, v).unwrap()
}

pub fn exact_identities() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(Check::from(
        "frequency split reconstructs input",
        (|| {
            let f = uniform(&[2, 5, 8, 12], -2.0, 2.0, 1).to_dtype(DType::F32)?;
            let mut worst = 0.0f64;
            for k in [2, 4] {
                let (low, high) = frequency_split(&f, k)?;
                let up = ops::upsample_nearest(&low, k)?;
                let rel = max_abs(&(up + high)?, &f)? / max_abs(&f, &f.zeros_like()?)?;
                worst = worst.max(rel);
            }
            Ok((worst <= 1e-6, format!("max rel {worst:.2e}")))
        })(),
    ));
    out.push(Check::from(
        "pixel shuffle roundtrip",
        (|| {
            let img = image(8, 12, 3, 2);
            let back = pixel_shuffle(&pixel_unshuffle(&img, 4)?, 4)?;
            Ok((back == img, String::new()))
        })(),
    ));
    out.push(Check::new(
        "tonemap endpoints",
        tonemap_value(0.0, 5000.0) == 0.0 && tonemap_value(1.0, 5000.0) == 1.0,
        "",
    ));
    out.push(Check::from(
        "HDR raw file roundtrip",
        (|| {
            let dir = tempfile::tempdir().map_err(|e| lfdiff::Error::Data(e.to_string()))?;
            let img = HdrImage::new(image(7, 5, 3, 3))?;
            let p = dir.path().join("x.lfhd");
            write_hdr_raw(&img, &p)?;
            let back = read_hdr_raw(&p)?;
            let bits = |i: &HdrImage| {
                i.pixels()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            };
            Ok((bits(&back) == bits(&img), String::new()))
        })(),
    ));
    out.push(Check::from(
        "ssim(a, a) = 1 and psnr cap",
        (|| {
            let a = image(16, 16, 3, 4);
            let s = ssim(&a, &a)?;
            let p = psnr(&a, &a, PSNR_CAP)?;
            let near = a.map(|v| v * 0.999999);
            let q = psnr(&a, &near, PSNR_CAP)?;
            Ok((
                s == 1.0 && p == PSNR_CAP && q <= PSNR_CAP,
                format!("ssim {s}, psnr {p}, near {q:.2}"),
            ))
        })(),
    ));
    out
}

pub fn diffusion_oracle() -> Vec<Check> {
    let mut out = Vec::new();
    let s = NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap();
    for steps in [1usize, 2, 5, 10, 25, 50, 100, 200] {
        out.push(Check::from(
            &format!("oracle DDIM recovers z0, S = {steps}"),
            (|| {
                let z0 = uniform(&[2, 3, 8, 8], -1.0, 1.0, 1).to_dtype(DType::F32)?;
                let eps = uniform(&[2, 3, 8, 8], -2.0, 2.0, 2).to_dtype(DType::F32)?;
                let cond = z0.zeros_like()?;
                let z_t = q_sample(&z0, 200, &eps, &s)?;
                let oracle = |z: &Tensor, _: &Tensor, t: usize| -> Result<Tensor> {
                    let ab = s.alpha_bar(t)?;
                    Ok(((z - z0.affine(ab.sqrt(), 0.0)?)? / (1.0 - ab).sqrt())?)
                };
                let z_hat = ddim_sample_from(oracle, &cond, z_t, steps, &s)?;
                let err = max_abs(&z_hat, &z0)?;
                Ok((err <= 1e-5, format!("max abs {err:.2e}")))
            })(),
        ));
    }
    out.push(Check::from(
        "q_sample equals iterated single steps",
        (|| {
            let z0 = uniform(&[1, 3, 4, 4], -1.0, 1.0, 3);
            let mut worst = 0.0f64;
            for t in [1usize, 7, 50, 200] {
                let eps = uniform(&[1, 3, 4, 4], -2.0, 2.0, 10 + t as u64);
                let direct = q_sample(&z0, t, &eps, &s)?;
                // z_t = sqrt(a_t) z_{t-1} + sqrt(b_t) e_t with the noise kept as a
                // deterministic multiple of `eps`: the accumulated standard
                // deviation must equal sqrt(1 - alpha_bar_t)
                let (mut mean, mut var) = (z0.clone(), 0.0f64);
                for i in 1..=t {
                    let a = s.alpha(i)?;
                    mean = mean.affine(a.sqrt(), 0.0)?;
                    var = a * var + s.beta(i)?;
                }
                let iterated = (mean + eps.affine(var.sqrt(), 0.0)?)?;
                worst = worst.max(max_abs(&direct, &iterated)?);
            }
            Ok((worst <= 1e-5, format!("max abs {worst:.2e}")))
        })(),
    ));
    out.push(Check::from(
        "schedule identities",
        (|| {
            let mut worst = 0.0f64;
            for t in 1..=200 {
                worst = worst.max((s.alpha(t)? + s.beta(t)? - 1.0).abs());
                worst = worst.max((s.alpha_bar(t)? / s.alpha_bar(t - 1)? - s.alpha(t)?).abs());
            }
            let ab200 = (s.alpha_bar(200)? - 0.132_182_754_250_617_79).abs();
            Ok((
                worst <= 1e-12 && ab200 <= 1e-12,
                format!("max {worst:.2e}, alpha_bar(200) off by {ab200:.2e}"),
            ))
        })(),
    ));
    out
}

fn identity_check(name: &str, f: impl FnOnce(&ParamStore, &Tensor) -> Result<Tensor>) -> Check {
    Check::from(
        name,
        (|| {
            let store = ParamStore::new(DType::F32, 1);
            let x = uniform(&[2, 8, 8, 8], -1.0, 1.0, 4).to_dtype(DType::F32)?;
            let y = f(&store, &x)?;
            let d = max_abs(&y, &x)?;
            Ok((d == 0.0, format!("max abs {d:e}")))
        })(),
    )
}

pub fn identity_at_init() -> Vec<Check> {
    let mut out = vec![
        identity_check("residual block", |s, x| {
            ResidualBlock::new(&s.root(), 8)?.forward(x)
        }),
        identity_check("transposed self-attention", |s, x| {
            TransposedSelfAttention::new(&s.root(), 8, 2)?.forward(x)
        }),
        identity_check("gated feed-forward", |s, x| {
            GatedFfn::new(&s.root(), 8, 2.66)?.forward(x)
        }),
        identity_check("low-frequency transformer", |s, x| {
            LowFrequencyTransformer::new(&s.root(), 8, 2, 2.66)?.forward(x)
        }),
        identity_check("cross-attention", |s, x| {
            let z = uniform(&[2, 3, 8, 8], -1.0, 1.0, 5).to_dtype(DType::F32)?;
            CrossAttention::new(&s.root(), 8, 3)?.forward(x, &z)
        }),
        identity_check("NAF block", |s, x| {
            let te = TimeEmbedding::new(&s.root().pp("t"), 8)?;
            let t = te.forward(&[5, 120], DType::F32, &Device::Cpu)?;
            NafBlock::new(&s.root().pp("b"), 8, te.out_dim())?.forward(x, &t)
        }),
    ];
    out.push(Check::from(
        "PIM output independent of z",
        (|| {
            let store = ParamStore::new(DType::F32, 1);
            let pim = Pim::new(&store.root(), 8, 3, 2.66, 4)?;
            let x = uniform(&[2, 8, 8, 8], -1.0, 1.0, 4).to_dtype(DType::F32)?;
            let z1 = uniform(&[2, 3, 2, 2], -1.0, 1.0, 6).to_dtype(DType::F32)?;
            let z2 = uniform(&[2, 3, 2, 2], -5.0, 5.0, 7).to_dtype(DType::F32)?;
            let (a, b) = (pim.forward(&x, &z1)?, pim.forward(&x, &z2)?);
            let c = pim.forward_without_prior(&x)?;
            let d = max_abs(&a, &b)?.max(max_abs(&a, &c)?);
            Ok((d == 0.0, format!("max abs {d:e}")))
        })(),
    ));
    out.push(Check::from(
        "reconstruction network independent of z",
        (|| {
            let store = ParamStore::new(DType::F32, 1);
            let cfg = LfDiffConfig::desk();
            let net = DhrNet::new(&store.root(), &cfg)?;
            let c = cfg.dhr_channels;
            let x = uniform(&[1, c, 16, 16], -1.0, 1.0, 4).to_dtype(DType::F32)?;
            let z1 = uniform(&[1, 3, 4, 4], -1.0, 1.0, 6).to_dtype(DType::F32)?;
            let z2 = uniform(&[1, 3, 4, 4], -5.0, 5.0, 7).to_dtype(DType::F32)?;
            let (a, b) = (net.forward(&x, Some(&z1))?, net.forward(&x, Some(&z2))?);
            let d = max_abs(&a, &b)?.max(max_abs(&a, &net.forward_without_prior(&x)?)?);
            Ok((d == 0.0, format!("max abs {d:e}")))
        })(),
    ));
    out
}
