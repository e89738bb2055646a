//! SGD with heavy-ball momentum and decoupled weight decay.
//!
//! `v <- momentum * v + g`, then `p <- p - lr * v - lr * weight_decay * p`.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

pub struct Sgd {
    config: SgdConfig,
    vars: Vec<(Var, Option<Tensor>)>,
}

impl Sgd {
    pub fn new(vars: impl IntoIterator<Item = Var>, config: SgdConfig) -> Result<Self> {
        if !(config.lr.is_finite() && config.lr > 0.0) {
            return Err(domain(format!("learning rate must be positive, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(domain(format!("momentum must lie in [0, 1), got {}", config.momentum)));
        }
        if !(config.weight_decay.is_finite() && config.weight_decay >= 0.0) {
            return Err(domain("weight decay must be non-negative"));
        }
        Ok(Self {
            config,
            vars: vars.into_iter().map(|v| (v, None)).collect(),
        })
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    /// Applies one update. Variables without a gradient still decay.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (var, velocity) in &mut self.vars {
            let p = var.as_tensor();
            let mut next = if weight_decay > 0.0 {
                (p * (1.0 - lr * weight_decay))?
            } else {
                p.clone()
            };
            if let Some(g) = grads.get(var) {
                let v = match velocity.take() {
                    Some(v) if momentum > 0.0 => ((v * momentum)? + g)?,
                    _ => g.clone(),
                };
                next = (next - (&v * lr)?)?;
                *velocity = Some(v.detach());
            } else if let Some(v) = velocity.take() {
                let v = (v * momentum)?;
                next = (next - (&v * lr)?)?;
                *velocity = Some(v);
            }
            var.set(&next.detach())?;
        }
        Ok(())
    }

    /// One step on `loss`.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn matches_hand_rolled_recurrence() {
        let w = Var::new(&[1.0f32, -2.0], &Device::Cpu).unwrap();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut opt = Sgd::new([w.clone()], cfg).unwrap();
        let (mut p, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
        for _ in 0..5 {
            // loss = sum(w^2), g = 2w
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
            for i in 0..2 {
                let g = 2.0 * p[i];
                v[i] = 0.9 * v[i] + g;
                p[i] = p[i] - 0.1 * v[i] - 0.1 * 0.01 * p[i];
            }
        }
        let got: Vec<f32> = w.as_tensor().to_vec1().unwrap();
        for i in 0..2 {
            assert!((got[i] as f64 - p[i]).abs() < 1e-5, "{got:?} vs {p:?}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let w = Var::new(&[1.0f32], &Device::Cpu).unwrap();
        let cfg = SgdConfig {
            lr: 0.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!(Sgd::new([w], cfg).is_err());
    }
}
