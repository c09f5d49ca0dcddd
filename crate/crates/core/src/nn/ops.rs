//! Differentiable tensor helpers built from primitive candle ops.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};

/// Non-overlapping `k x k` average pooling.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err!("avg_pool: {h}x{w} not divisible by {k}"));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let pooled = x
        .contiguous()?
        .reshape((n, c, h / k, k, w / k, k))?
        .sum(5)?
        .sum(3)?;
    Ok(pooled.affine(1.0 / (k * k) as f64, 0.0)?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if k == 1 {
        return Ok(x.clone());
    }
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, k, w, k))?
        .reshape((n, c, h * k, w * k))?)
}

/// Tensor counterpart of [`crate::data::pixel_unshuffle`]: output channel
/// `(dy * k + dx) * C + c`.
pub fn pixel_unshuffle(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err!("pixel_unshuffle: {h}x{w} not divisible by {k}"));
    }
    Ok(x.contiguous()?
        .reshape((n, c, h / k, k, w / k, k))?
        .permute((0, 3, 5, 1, 2, 4))?
        .contiguous()?
        .reshape((n, k * k * c, h / k, w / k))?)
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

struct UnitClamp;

impl candle_core::CustomOp1 for UnitClamp {
    fn name(&self) -> &'static str {
        "unit_clamp"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        fn clamp<T: candle_core::WithDType>(
            data: &[T],
            layout: &candle_core::Layout,
        ) -> candle_core::Result<Vec<T>> {
            let (zero, one) = (T::zero(), T::one());
            let (a, b) = layout.contiguous_offsets().ok_or_else(|| {
                candle_core::Error::Msg("unit clamp expects contiguous input".into())
            })?;
            Ok(data[a..b]
                .iter()
                .map(|&v| {
                    if v < zero {
                        zero
                    } else if v > one {
                        one
                    } else {
                        v
                    }
                })
                .collect())
        }
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(clamp(d, layout)?),
            CpuStorage::F64(d) => CpuStorage::F64(clamp(d, layout)?),
            _ => {
                return Err(candle_core::Error::Msg(
                    "unit clamp supports f32 and f64".into(),
                ))
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let zeros = grad.zeros_like()?;
        let inside = x.ge(0.0)?.mul(&x.le(1.0)?)?;
        let raise = x.lt(0.0)?.mul(&grad.lt(0.0)?)?;
        let lower = x.gt(1.0)?.mul(&grad.gt(0.0)?)?;
        let keep = inside.add(&raise)?.add(&lower)?;
        Ok(Some(keep.where_cond(grad, &zeros)?))
    }
}

/// Clamps to `[0, 1]`. Inside the range the gradient is the identity; outside
/// it only the component pointing back into the range survives, so clipped
/// values can recover without drifting further out.
pub fn unit_clamp(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(UnitClamp)?)
}

/// Splits channels in half and multiplies the halves.
pub fn simple_gate(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if c % 2 != 0 {
        return Err(shape_err!(
            "simple_gate needs an even channel count, got {c}"
        ));
    }
    let a = x.narrow(1, 0, c / 2)?;
    let b = x.narrow(1, c / 2, c / 2)?;
    Ok((a * b)?)
}

/// Divides every `(n, c)` slice by its L2 norm over the trailing dimension.
pub fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let norm = x
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .affine(1.0, 1e-12)?
        .sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// μ-law tonemap, differentiable.
pub fn tonemap(x: &Tensor, mu: f64) -> Result<Tensor> {
    Ok(x.affine(mu, 1.0)?.log()?.affine(1.0 / mu.ln_1p(), 0.0)?)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
