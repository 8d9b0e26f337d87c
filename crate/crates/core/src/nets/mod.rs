//! Generator and critic networks.
//!
//! The generator bins the noise vector, appends the conditional vector to
//! every bin and projects each through one shared MLP into ϖ channels. Half
//! the channels pass through the first residual block; the other half skip
//! to the second. The first block's output also skips to the third. A
//! position-wise non-local block precedes the μ̄ and σ̄ heads, and a row is
//! drawn from N(μ̄, σ̄²) and activated per encoded segment.

mod discriminator;
mod generator;
pub mod layers;

use serde::{Deserialize, Serialize};

pub use discriminator::{Critics, Discriminator, DiscriminatorConfig, DISCRIMINATOR_NAMESPACE_BASE};
pub use generator::{Block, BlockParts, ConvBlock, GenOutput, Generator, NonLocal, ResidualBlock, GENERATOR_NAMESPACE};
pub use layers::Mode;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Residual,
    Convolutional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d_z: usize,
    pub bin_len: usize,
    /// ϖ, channels leaving the linear block; must be even.
    pub channels: usize,
    pub hidden: usize,
    pub filters: usize,
    pub kernel: usize,
    pub gumbel_tau: f64,
    /// Initial σ̄: the σ̄ head's bias starts at softplus⁻¹ of this value.
    pub sigma_init: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub block_kind: BlockKind,
    pub ablate_middle_residual: bool,
    pub skip_lr: bool,
    pub skip_rr: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_z: 32,
            bin_len: 8,
            channels: 8,
            hidden: 64,
            filters: 16,
            kernel: 3,
            gumbel_tau: 0.16,
            sigma_init: 0.05,
            bn_momentum: 0.22,
            bn_eps: 1e-2,
            block_kind: BlockKind::Residual,
            ablate_middle_residual: false,
            skip_lr: true,
            skip_rr: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_z == 0 {
            return bad("d_z must be at least 1");
        }
        if self.bin_len == 0 {
            return bad("bin_len must be at least 1");
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return bad("channel count must be even and positive");
        }
        if self.filters == 0 || self.hidden == 0 {
            return bad("filters and hidden width must be positive");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel width must be odd");
        }
        if !(self.gumbel_tau > 0.0) {
            return bad("Gumbel temperature must be positive");
        }
        if !(self.sigma_init > 0.0 && self.sigma_init.is_finite()) {
            return bad("initial sigma must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in [0,1] and eps be positive");
        }
        Ok(())
    }
}

pub fn bin_count(d_z: usize, bin_len: usize) -> usize {
    d_z.div_ceil(bin_len)
}

/// Splits `z` into bins of `bin_len` (the last zero-padded) and appends the
/// whole conditional vector to each.
pub fn split_concat(z: &[f64], cond: &[f64], bin_len: usize) -> Result<Vec<Vec<f64>>> {
    if z.is_empty() {
        return Err(Error::Nets("noise vector is empty".into()));
    }
    if bin_len == 0 {
        return Err(Error::Nets("bin length must be at least 1".into()));
    }
    Ok(z
        .chunks(bin_len)
        .map(|c| {
            let mut bin = c.to_vec();
            bin.resize(bin_len, 0.0);
            bin.extend_from_slice(cond);
            bin
        })
        .collect())
}

/// Batched [`split_concat`]: z [B, d_z], cond [B, k] → [B·bins, bin_len + k].
pub fn bins_tensor(z: &Tensor, cond: &Tensor, bin_len: usize) -> Result<Tensor> {
    let (batch, d_z) = (z.shape()[0], z.shape()[1]);
    let k = cond.shape()[1];
    let mut data = Vec::with_capacity(batch * bin_count(d_z, bin_len) * (bin_len + k));
    for b in 0..batch {
        let zr = &z.data()[b * d_z..(b + 1) * d_z];
        let cr = &cond.data()[b * k..(b + 1) * k];
        for bin in split_concat(zr, cr, bin_len)? {
            data.extend(bin);
        }
    }
    Tensor::new(vec![batch * bin_count(d_z, bin_len), bin_len + k], data)
}

#[cfg(test)]
mod tests;
