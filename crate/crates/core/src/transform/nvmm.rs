//! Normal variance-mean mixture reparameterization of fitted mixture modes.
//!
//! Each mode ⟨μ, σ⟩ is translated to ⟨α + βω, |σω|⟩ where α, β ~ U[−1, 1]
//! and ω is one draw from the fitted mixture, frozen per mode. (α, β) are
//! resampled until every active mode moves at least ε away from its
//! original mean.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vgm::{VgmModel, STD_FLOOR};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_EPSILON: f64 = 0.005;
pub const DEFAULT_MAX_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvmmParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// One mixing draw per mode, same indexing as `VgmModel::modes`.
    pub omega: Vec<f64>,
    pub mu_tilde: Vec<f64>,
    pub sigma_tilde: Vec<f64>,
}

impl NvmmParams {
    /// Smallest |α + βω_k − μ_k| over the active modes.
    pub fn min_separation(&self, vgm: &VgmModel) -> f64 {
        vgm.active_indices()
            .into_iter()
            .map(|k| (self.alpha + self.beta * self.omega[k] - vgm.modes[k].mean).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Whether (α, β, ω) keeps every active mode at least ε from its mean.
pub fn satisfies_separation(alpha: f64, beta: f64, omega: &[f64], vgm: &VgmModel, epsilon: f64) -> bool {
    vgm.active_indices()
        .into_iter()
        .all(|k| (alpha + beta * omega[k] - vgm.modes[k].mean).abs() >= epsilon)
}

pub fn reparameterize_nvmm(vgm: &VgmModel, epsilon: f64, seed: u64, max_retries: usize) -> Result<NvmmParams> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Transform(format!("epsilon must be positive, got {epsilon}")));
    }
    if vgm.active_count() == 0 {
        return Err(Error::Transform("mixture has no active mode".into()));
    }
    let mut rng = seed::rng(seed);
    let omega: Vec<f64> = (0..vgm.modes.len()).map(|_| vgm.sample(&mut rng)).collect();
    for _ in 0..max_retries.max(1) {
        let alpha = rng.random_range(-1.0..=1.0);
        let beta = rng.random_range(-1.0..=1.0);
        if satisfies_separation(alpha, beta, &omega, vgm, epsilon) {
            let mu_tilde = omega.iter().map(|w| alpha + beta * w).collect();
            let sigma_tilde = vgm
                .modes
                .iter()
                .zip(&omega)
                .map(|(m, w)| (m.std * w).abs().max(STD_FLOOR))
                .collect();
            return Ok(NvmmParams {
                alpha,
                beta,
                epsilon,
                omega,
                mu_tilde,
                sigma_tilde,
            });
        }
    }
    Err(Error::Transform(format!(
        "no (alpha, beta) met the separation constraint eps={epsilon} within {max_retries} draws; lower epsilon"
    )))
}
