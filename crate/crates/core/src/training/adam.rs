use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// Adam with bias correction. Moments are keyed by parameter name so they
/// can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) step: u64,
    pub(crate) m: BTreeMap<String, Tensor>,
    pub(crate) v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Gradients of `vars` present in `grads`, in order.
pub fn collect_grads(vars: &[(String, Var)], grads: &GradStore) -> Vec<Option<Tensor>> {
    vars.iter()
        .map(|(_, v)| grads.get(v.as_tensor()).cloned())
        .collect()
}

/// Global L2 norm over all present gradients.
pub fn global_norm(grads: &[Option<Tensor>]) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += crate::nn::ops::scalar(&g.sqr()?.sum_all()?)?;
    }
    Ok(sq.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for g in grads.iter_mut().flatten() {
            *g = g.affine(scale, 0.0)?;
        }
    }
    Ok(norm)
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every variable that has a gradient.
    pub fn step(
        &mut self,
        vars: &[(String, Var)],
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((name, var), g) in vars.iter().zip(grads) {
            let Some(g) = g else { continue };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => (v.affine(self.beta2, 0.0)? + g2.affine(1.0 - self.beta2, 0.0)?)?,
                None => g2.affine(1.0 - self.beta2, 0.0)?,
            };
            let denom = v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
            let update = m.affine(lr / c1, 0.0)?.div(&denom)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn single_step_matches_formula() {
        // loss = sum (a_i x_i^2), grad = 2 a x
        let x0 = [0.5f64, -1.5, 2.0];
        let a = [1.0f64, 3.0, 0.25];
        let x = Var::from_vec(x0.to_vec(), 3, &Device::Cpu).unwrap();
        let at = Tensor::from_vec(a.to_vec(), 3, &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let mut opt = Adam::default();
        let lr = 1e-2;
        let mut expect = x0;
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        for t in 1..=3 {
            let loss = (x.as_tensor().sqr().unwrap() * &at)
                .unwrap()
                .sum_all()
                .unwrap();
            let grads = collect_grads(&vars, &loss.backward().unwrap());
            opt.step(&vars, &grads, lr).unwrap();
            for i in 0..3 {
                let g = 2.0 * a[i] * expect[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                expect[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
            let got = x.as_tensor().to_vec1::<f64>().unwrap();
            for i in 0..3 {
                assert!(
                    (got[i] - expect[i]).abs() < 1e-8,
                    "step {t}: {got:?} vs {expect:?}"
                );
            }
        }
        assert_eq!(x.dtype(), DType::F64);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![
            Some(Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap()),
            None,
        ];
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 5.0);
        assert!((global_norm(&g).unwrap() - 1.0).abs() < 1e-9);
    }
}
