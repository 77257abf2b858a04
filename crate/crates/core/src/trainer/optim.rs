use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Param, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← m·v + g + wd·w`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates `params` in place and zeroes their gradients. A non-finite
    /// gradient aborts the step before any parameter is touched.
    pub fn step(&mut self, params: Vec<&mut Param>, cfg: &OptimConfig) -> Result<()> {
        for p in &params {
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at flat index {i} is {}",
                    p.name,
                    p.grad.data()[i]
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, given {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if v.shape() != p.value.shape() {
                return Err(Error::State(format!("velocity shape mismatch for {}", p.name)));
            }
            let vd = v.data_mut();
            let gd = p.grad.data();
            let wd = p.value.data_mut();
            for i in 0..vd.len() {
                vd[i] = cfg.momentum * vd[i] + gd[i] + cfg.weight_decay * wd[i];
                wd[i] -= cfg.learning_rate * vd[i];
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, m: f64, wd: f64) -> OptimConfig {
        OptimConfig {
            learning_rate: lr,
            momentum: m,
            weight_decay: wd,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn vanilla_and_zero_grad_steps() {
        let mut p = Param::new("w", Tensor::vector(vec![1.0, -2.0]));
        p.grad = Tensor::vector(vec![0.5, 4.0]);
        Sgd::new().step(vec![&mut p], &cfg(0.1, 0.0, 0.0)).unwrap();
        assert_eq!(p.value.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 4.0]);
        assert_eq!(p.grad.data(), &[0.0, 0.0]);
        let before = p.value.clone();
        Sgd::new().step(vec![&mut p], &cfg(0.1, 0.9, 0.0)).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut a = Param::new("a", Tensor::vector(vec![1.0]));
        let mut b = Param::new("b", Tensor::vector(vec![1.0]));
        a.grad = Tensor::vector(vec![1.0]);
        b.grad = Tensor::vector(vec![f64::NAN]);
        let err = Sgd::new().step(vec![&mut a, &mut b], &cfg(0.1, 0.0, 0.0));
        assert!(matches!(err, Err(Error::NonFinite(m)) if m.contains('b')));
        assert_eq!(a.value.data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(cfg(0.0, 0.9, 0.0).validate().is_err());
        assert!(cfg(0.1, 1.0, 0.0).validate().is_err());
        assert!(cfg(0.1, 0.5, -1.0).validate().is_err());
    }
}
