//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state for a fixed list of tensors. Moments are kept in f64 and
/// allocated on a tensor's first update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(config: AdamConfig, n_tensors: usize) -> Self {
        AdamW {
            config,
            t: 0,
            m: vec![None; n_tensors],
            v: vec![None; n_tensors],
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every tensor with `requires_grad`, consuming its
    /// gradient. Frozen tensors are left untouched. Tensor `i` is reported
    /// as `name(i)` when its gradient is missing.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], lr: f64, name: impl Fn(usize) -> String) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        // Check first so a failed step leaves everything unchanged.
        if let Some(i) = params.iter().position(|p| p.requires_grad() && p.grad().is_none()) {
            return Err(Error::MissingGrad(name(i)));
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * c.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let g = p.take_grad().expect("checked above");
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64().unwrap_or(f64::NAN);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                let wj = w.to_f64().unwrap_or(f64::NAN) * decay - lr * mh / (vh.sqrt() + c.eps);
                *w = T::lit(wj);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then constant.
/// `step` counts from 1.
pub fn lr_at_step(step: u64, lr: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        return lr;
    }
    lr * (step as f64 / warmup as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32) -> Tensor {
        Tensor::scalar(v).with_requires_grad(true)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![param(1.0)];
        p[0].accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            1,
        );
        opt.step(&mut p, 0.1, |i| i.to_string()).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!(p[0].grad().is_none());
    }

    #[test]
    fn zero_grad_applies_pure_decay() {
        let mut p = vec![param(2.0)];
        p[0].accumulate_grad(&[0.0]);
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.1,
                ..AdamConfig::default()
            },
            1,
        );
        opt.step(&mut p, 0.01, |i| i.to_string()).unwrap();
        assert!((p[0].data()[0] as f64 - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-6);
    }

    #[test]
    fn frozen_untouched_and_missing_grad_rejected() {
        let mut p = vec![Tensor::scalar(3.0f32), param(1.0)];
        let mut opt = AdamW::new(AdamConfig::default(), 2);
        let err = opt.step(&mut p, 0.1, |i| format!("p{i}")).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "p1"));
        assert_eq!(opt.steps(), 0);
        p[1].accumulate_grad(&[0.5]);
        opt.step(&mut p, 0.1, |i| format!("p{i}")).unwrap();
        assert_eq!(p[0].data()[0], 3.0);
        assert_ne!(p[1].data()[0], 1.0);
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at_step(1, 1e-4, 0), 1e-4);
        assert!((lr_at_step(50, 1e-4, 100) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(100, 1e-4, 100), 1e-4);
        assert_eq!(lr_at_step(5000, 1e-4, 100), 1e-4);
    }
}
