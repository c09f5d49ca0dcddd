//! Central finite-difference gradient checking.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the coordinate with the largest error.
    pub worst: String,
}

/// Compares autodiff gradients of the scalar `f` against central differences
/// with step `h` on up to `samples` coordinates of every variable.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`; the
/// floor keeps coordinates whose true gradient is essentially zero from
/// dividing round-off by round-off.
pub fn check_gradients(
    vars: &[(String, Var)],
    samples: usize,
    h: f64,
    floor: f64,
    seed: u64,
    f: impl Fn() -> Result<Tensor>,
) -> Result<GradCheck> {
    let loss = f()?;
    let grads = loss.backward()?;
    let eval = || -> Result<f64> { Ok(f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (name, var) in vars {
        let n = var.elem_count();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
            None => vec![0.0; n],
        };
        let original = var.as_tensor().copy()?;
        let base: Vec<f64> = original.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, var.shape(), var.device())?.to_dtype(var.dtype())?;
                var.set(&t)?;
                eval()
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            var.set(&original)?;
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
