//! Cantor-distributed conditional vectors.
//!
//! A Cantor variable is `Σ d_i 3^{-i}` with digits `d_i` drawn uniformly from
//! {0, 2}; its moment generating function is `e^{t/2} Π cosh(t 3^{-k})`.
//! The compound conditional vector concatenates one Cantor draw per discrete
//! one-hot slot with one per binary one-hot slot, from two independent
//! streams.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, ColumnSchema};
use crate::seed;

pub const DEFAULT_DEPTH: u32 = 32;
/// Digits per 64-bit draw.
const MAX_DEPTH: u32 = 64;

/// Stream of Cantor-distributed reals.
#[derive(Debug, Clone)]
pub struct CantorSampler {
    depth: u32,
    rng: seed::Rng,
    /// 3^{-i} for i = 1..=depth.
    powers: Vec<f64>,
}

impl CantorSampler {
    pub fn new(depth: u32, seed: u64) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::Cond(format!("Cantor depth must be in 1..={MAX_DEPTH}, got {depth}")));
        }
        let powers = (1..=depth as i32).map(|i| 3f64.powi(-i)).collect();
        Ok(CantorSampler {
            depth,
            rng: seed::rng(seed),
            powers,
        })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn sample(&mut self) -> f64 {
        let bits = self.rng.next_u64();
        // Sum from the smallest digit up to limit rounding.
        let mut x = 0.0;
        for i in (0..self.depth as usize).rev() {
            if (bits >> i) & 1 == 1 {
                x += 2.0 * self.powers[i];
            }
        }
        x
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.sample();
        }
    }
}

pub fn sample_cantor(n: usize, depth: u32, seed: u64) -> Result<Vec<f64>> {
    let mut s = CantorSampler::new(depth, seed)?;
    Ok((0..n).map(|_| s.sample()).collect())
}

/// Truncated Cantor MGF `e^{t/2} Π_{k=1..k_max} cosh(t 3^{-k})`.
pub fn mgf_cantor(t: f64, k_max: u32) -> Result<f64> {
    if k_max == 0 {
        return Err(Error::Cond("k_max must be at least 1".into()));
    }
    let mut v = (t / 2.0).exp();
    for k in 1..=k_max as i32 {
        v *= (t * 3f64.powi(-k)).cosh();
    }
    if !v.is_finite() {
        return Err(Error::Cond(format!("Cantor MGF overflows at t = {t}")));
    }
    Ok(v)
}

/// Widths of the discrete and binary segments for a schema.
pub fn segment_widths(schema: &[ColumnSchema]) -> (usize, usize) {
    let width = |kind| {
        schema
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.categories.len())
            .sum::<usize>()
    };
    (width(ColumnKind::Discrete), width(ColumnKind::Binary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundCondVector {
    pub k_d: usize,
    pub k_b: usize,
    /// η_d ⊕ η_b.
    pub data: Vec<f64>,
}

impl CompoundCondVector {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn discrete(&self) -> &[f64] {
        &self.data[..self.k_d]
    }

    pub fn binary(&self) -> &[f64] {
        &self.data[self.k_d..]
    }
}

/// Draws compound conditional vectors from two independent Cantor streams
/// whose seeds derive from one master seed.
#[derive(Debug, Clone)]
pub struct CondSampler {
    k_d: usize,
    k_b: usize,
    discrete: CantorSampler,
    binary: CantorSampler,
}

impl CondSampler {
    pub fn new(k_d: usize, k_b: usize, depth: u32, seed: u64) -> Result<Self> {
        Ok(CondSampler {
            k_d,
            k_b,
            discrete: CantorSampler::new(depth, seed::derive(seed, "cond-discrete"))?,
            binary: CantorSampler::new(depth, seed::derive(seed, "cond-binary"))?,
        })
    }

    pub fn for_schema(schema: &[ColumnSchema], depth: u32, seed: u64) -> Result<Self> {
        let (k_d, k_b) = segment_widths(schema);
        Self::new(k_d, k_b, depth, seed)
    }

    pub fn width(&self) -> usize {
        self.k_d + self.k_b
    }

    pub fn sample(&mut self) -> CompoundCondVector {
        let mut data = vec![0.0; self.width()];
        self.fill(&mut data);
        CompoundCondVector {
            k_d: self.k_d,
            k_b: self.k_b,
            data,
        }
    }

    /// Writes one vector into `out` (length k_d + k_b).
    pub fn fill(&mut self, out: &mut [f64]) {
        let (d, b) = out.split_at_mut(self.k_d);
        self.discrete.fill(d);
        self.binary.fill(b);
    }
}

pub fn build_cond_vector(schema: &[ColumnSchema], depth: u32, seed: u64) -> Result<CompoundCondVector> {
    Ok(CondSampler::for_schema(schema, depth, seed)?.sample())
}
