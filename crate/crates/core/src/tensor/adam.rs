use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Param, ParamId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1.2e-4,
            beta1: 0.0,
            beta2: 0.85,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers are keyed by parameter id.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let AdamConfig { lr, beta1, beta2, eps } = config;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Train(format!("Adam betas must lie in [0,1), got ({beta1}, {beta2})")));
        }
        if !(lr > 0.0 && eps > 0.0) {
            return Err(Error::Train("Adam lr and eps must be positive".into()));
        }
        Ok(Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grad_of` returns the gradient for a parameter, or None
    /// when the parameter did not take part in the loss (treated as zero).
    pub fn step<'a, F>(&mut self, params: Vec<&mut Param>, grad_of: F) -> Result<()>
    where
        F: Fn(ParamId) -> Option<&'a [f64]>,
    {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for p in params {
            let n = p.value.len();
            let (m, v) = self
                .moments
                .entry(p.id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::Train(format!(
                    "parameter '{}' changed size from {} to {n}",
                    p.name,
                    m.len()
                )));
            }
            let Some(g) = grad_of(p.id) else { continue };
            if g.len() != n {
                return Err(Error::Train(format!("gradient for '{}' has wrong length", p.name)));
            }
            for (((w, mi), vi), &gi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamAlloc, Tensor};

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = ParamAlloc::new(0).param("w", Tensor::vector(vec![0.3, -0.2]));
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let g = vec![0.0, 0.0];
        for _ in 0..5 {
            adam.step(vec![&mut p], |_| Some(&g)).unwrap();
        }
        assert_eq!(p.value.data(), &[0.3, -0.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamAlloc::new(0).param("w", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let g = vec![1.0];
        adam.step(vec![&mut p], |_| Some(&g)).unwrap();
        // m̂ = 1, v̂ = 0.15/0.15 = 1, so the step is lr/(1 + eps).
        let expected = -1.2e-4 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn second_step_follows_the_recurrence() {
        let mut p = ParamAlloc::new(0).param("w", Tensor::vector(vec![0.0]));
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.85, eps: 1e-8 };
        let mut adam = Adam::new(cfg).unwrap();
        let (g1, g2) = (vec![1.0], vec![-2.0]);
        adam.step(vec![&mut p], |_| Some(&g1)).unwrap();
        adam.step(vec![&mut p], |_| Some(&g2)).unwrap();
        let mut w = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 1.0), (2, -2.0)] {
            m = 0.5 * m + 0.5 * g;
            v = 0.85 * v + 0.15 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.85f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.value.data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn size_drift_and_bad_betas_error() {
        assert!(Adam::new(AdamConfig { beta2: 1.0, ..AdamConfig::default() }).is_err());
        let mut alloc = ParamAlloc::new(0);
        let mut p = alloc.param("w", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let g = vec![1.0];
        adam.step(vec![&mut p], |_| Some(&g)).unwrap();
        p.value = Tensor::vector(vec![0.0, 0.0]);
        let g2 = vec![1.0, 1.0];
        assert!(adam.step(vec![&mut p], |_| Some(&g2)).is_err());
    }
}
