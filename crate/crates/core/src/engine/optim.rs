//! Adam with a polynomial learning-rate schedule and global-norm clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// `lr_end + (lr_start - lr_end) * (1 - step / total) ^ power`.
pub fn poly_lr(step: usize, total: usize, lr_start: f64, lr_end: f64, power: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
    lr_end + (lr_start - lr_end) * (1.0 - frac).powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates keyed by parameter name.
pub struct Adam {
    pub hyper: AdamHyper,
    /// Number of updates applied so far.
    pub t: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(vars: &BTreeMap<String, Var>, hyper: AdamHyper) -> Result<Self> {
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        let m = vars.iter().map(|(k, v)| Ok((k.clone(), zeros(v)?))).collect::<Result<_>>()?;
        let v = vars.iter().map(|(k, v)| Ok((k.clone(), zeros(v)?))).collect::<Result<_>>()?;
        Ok(Self { hyper, t: 0, m, v })
    }

    /// Global gradient norm over `vars`.
    pub fn grad_norm(vars: &BTreeMap<String, Var>, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for v in vars.values() {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update; gradients are scaled down so their global norm is at most `clip` (if positive).
    /// Returns the unclipped gradient norm.
    pub fn step(&mut self, vars: &BTreeMap<String, Var>, grads: &GradStore, lr: f64, clip: f64) -> Result<f64> {
        let norm = Self::grad_norm(vars, grads)?;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g.detach() * scale)?;
            let m = ((&self.m[name] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[name] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(0, 100, 2e-4, 1e-5, 0.9), 2e-4);
        assert!((poly_lr(100, 100, 2e-4, 1e-5, 0.9) - 1e-5).abs() < 1e-18);
        let mid = poly_lr(50, 100, 2e-4, 1e-5, 1.0);
        assert!((mid - (1e-5 + 1.9e-4 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &candle_core::Device::Cpu).unwrap();
        let mut vars = BTreeMap::new();
        vars.insert("x".to_string(), x.clone());
        let mut opt = Adam::new(&vars, AdamHyper::default()).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&vars, &grads, 0.05, 0.0).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-2), "{v:?}");
    }
}
