//! Adam with externally visible moment estimates, so optimizer state can be
//! checkpointed and restored exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every variable in `vars` that received a gradient.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

/// Linear decay from `lr` at step 0 to `lr_end` at step `total - 1`.
pub fn linear_lr(lr: f64, lr_end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    lr + (lr_end - lr) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&vars, &grads, 0.05).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
        assert_eq!(opt.t, 2000);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(linear_lr(1e-3, 1e-4, 0, 10), 1e-3);
        assert!((linear_lr(1e-3, 1e-4, 9, 10) - 1e-4).abs() < 1e-15);
        assert_eq!(linear_lr(1e-3, 1e-4, 0, 1), 1e-3);
    }
}
