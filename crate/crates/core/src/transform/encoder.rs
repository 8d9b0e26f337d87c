use serde::{Deserialize, Serialize};

use super::nvmm::{reparameterize_nvmm, NvmmParams};
use super::vgm::{fit_vgm_traced, log_normal_pdf, VgmModel, VgmOptions};
use crate::error::{Error, Result};

pub const DEFAULT_CLIP_WIDTH: f64 = 4.0;

/// Index of the first maximum; ties resolve to the lower index.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Affine standardization applied before the mixture sees a value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: f64,
    pub scale: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer { shift: 0.0, scale: 1.0 };

    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Standardizer {
            shift: mean,
            scale: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        }
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        self.shift + self.scale * z
    }
}

/// Continuous column encoder: mode one-hot over the active reparameterized
/// modes, followed by one scalar `(z − μ̃)/(k_w σ̃)` clipped to [−1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousEncoder {
    pub vgm: VgmModel,
    pub nvmm: NvmmParams,
    pub clip_width: f64,
    pub standardizer: Standardizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFitOptions {
    pub vgm: VgmOptions,
    pub epsilon: f64,
    pub max_retries: usize,
    /// Minimum clip width; widened at fit time when `cover_training` is set.
    pub clip_width: f64,
    pub standardize: bool,
    /// Widen the clip width so no fitted value is clipped.
    pub cover_training: bool,
}

impl Default for ContinuousFitOptions {
    fn default() -> Self {
        ContinuousFitOptions {
            vgm: VgmOptions::default(),
            epsilon: super::nvmm::DEFAULT_EPSILON,
            max_retries: super::nvmm::DEFAULT_MAX_RETRIES,
            clip_width: DEFAULT_CLIP_WIDTH,
            standardize: true,
            cover_training: true,
        }
    }
}

impl ContinuousEncoder {
    pub fn fit(values: &[f64], opts: &ContinuousFitOptions, seed: u64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Transform("cannot fit an encoder on an empty column".into()));
        }
        let standardizer = if opts.standardize {
            Standardizer::fit(values)
        } else {
            Standardizer::IDENTITY
        };
        let z: Vec<f64> = values.iter().map(|&v| standardizer.forward(v)).collect();
        let vgm = fit_vgm_traced(&z, opts.vgm, crate::seed::derive(seed, "vgm"))?.model;
        let nvmm = reparameterize_nvmm(&vgm, opts.epsilon, crate::seed::derive(seed, "nvmm"), opts.max_retries)?;
        let mut enc = ContinuousEncoder {
            vgm,
            nvmm,
            clip_width: opts.clip_width,
            standardizer,
        };
        if opts.cover_training {
            let needed = z.iter().map(|&v| enc.required_width(v)).fold(0.0, f64::max);
            // Small margin keeps boundary values strictly inside after rounding.
            enc.clip_width = enc.clip_width.max(needed * (1.0 + 1e-9));
        }
        Ok(enc)
    }

    /// Clip width at which standardized value `z` sits exactly on the
    /// boundary of its selected mode.
    fn required_width(&self, z: f64) -> f64 {
        let k = self.active()[self.select_mode(z)];
        (z - self.nvmm.mu_tilde[k]).abs() / self.nvmm.sigma_tilde[k]
    }

    pub fn active(&self) -> Vec<usize> {
        self.vgm.active_indices()
    }

    /// Encoded width: active mode count plus one scalar.
    pub fn width(&self) -> usize {
        self.vgm.active_count() + 1
    }

    /// Position (among active modes) maximizing |ω_k|·N(z | μ̃_k, σ̃_k),
    /// compared in log space; ties go to the lower position.
    pub fn select_mode(&self, z: f64) -> usize {
        let scores: Vec<f64> = self
            .active()
            .into_iter()
            .map(|k| {
                let w = self.nvmm.omega[k].abs();
                if w == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    w.ln() + log_normal_pdf(z, self.nvmm.mu_tilde[k], self.nvmm.sigma_tilde[k])
                }
            })
            .collect();
        argmax_first(&scores)
    }

    pub fn encode(&self, value: f64) -> Result<Vec<f64>> {
        if !value.is_finite() {
            return Err(Error::Transform(format!("cannot encode non-finite value {value}")));
        }
        let z = self.standardizer.forward(value);
        let active = self.active();
        let pos = self.select_mode(z);
        let k = active[pos];
        let mut out = vec![0.0; active.len() + 1];
        out[pos] = 1.0;
        let s = (z - self.nvmm.mu_tilde[k]) / (self.clip_width * self.nvmm.sigma_tilde[k]);
        out[active.len()] = s.clamp(-1.0, 1.0);
        Ok(out)
    }

    pub fn decode(&self, v: &[f64]) -> Result<f64> {
        let active = self.active();
        if v.len() != active.len() + 1 {
            return Err(Error::Transform(format!(
                "continuous segment has length {}, expected {}",
                v.len(),
                active.len() + 1
            )));
        }
        let pos = argmax_first(&v[..active.len()]);
        let k = active[pos];
        let s = v[active.len()].clamp(-1.0, 1.0);
        let z = self.nvmm.mu_tilde[k] + self.clip_width * self.nvmm.sigma_tilde[k] * s;
        Ok(self.standardizer.inverse(z))
    }
}

/// Categorical encoder: one-hot mapped by v ↦ 2v − 1 into [−1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEncoder {
    pub categories: Vec<String>,
}

impl CategoricalEncoder {
    pub fn new(categories: Vec<String>) -> Self {
        CategoricalEncoder { categories }
    }

    pub fn width(&self) -> usize {
        self.categories.len()
    }

    pub fn encode(&self, index: usize) -> Result<Vec<f64>> {
        let k = self.width();
        if index >= k {
            return Err(Error::Transform(format!("category index {index} out of range for width {k}")));
        }
        Ok((0..k).map(|i| if i == index { 1.0 } else { -1.0 }).collect())
    }

    pub fn decode(&self, v: &[f64]) -> Result<usize> {
        if v.len() != self.width() {
            return Err(Error::Transform(format!(
                "categorical segment has length {}, expected {}",
                v.len(),
                self.width()
            )));
        }
        Ok(argmax_first(v))
    }
}
