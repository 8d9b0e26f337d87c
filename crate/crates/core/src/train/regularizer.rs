//! Trace-interval weight regularizer.
//!
//! A layer's spectrum λ (singular values of its weight matrix) defines the
//! trace surrogate Σλ. After every generator step the surrogate must stay
//! within ϑ of the reference captured at the previous call, where
//! ϑ = 1 + median(λ). A layer outside the interval is rescaled so that its
//! surrogate lands on the violated endpoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monitor::svd_spectrum;

/// Median with the midpoint convention for even lengths.
pub fn median(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Train("median of an empty list".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Ok(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// ϑ = 1 + median(λ).
pub fn compute_vartheta(lambda: &[f64]) -> Result<f64> {
    Ok(1.0 + median(lambda)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lambda: Vec<f64>,
}

impl Interval {
    pub fn trace(&self) -> f64 {
        self.lambda.iter().sum()
    }
}

/// (Σλ − ϑ, Σλ + ϑ, λ) for a row-major matrix.
pub fn gershgorin_interval(rows: usize, cols: usize, weights: &[f64]) -> Result<Interval> {
    let lambda = svd_spectrum(rows, cols, weights).map_err(|e| Error::Train(e.to_string()))?;
    let t: f64 = lambda.iter().sum();
    let v = compute_vartheta(&lambda)?;
    Ok(Interval {
        lo: t - v,
        hi: t + v,
        lambda,
    })
}

/// Per-layer reference captured at the previous call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub t_ref: Option<f64>,
    pub vartheta: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// First call: the reference was captured, nothing else happened.
    Initialized,
    Inside,
    Rescaled { factor: f64 },
    /// Zero trace surrogate; the layer cannot be rescaled.
    SkippedZero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub projection: Projection,
    pub lo: f64,
    pub hi: f64,
    pub trace_before: f64,
    pub trace_after: f64,
    /// ϑ stored for the next call.
    pub vartheta: f64,
}

impl Outcome {
    pub fn projected(&self) -> bool {
        matches!(self.projection, Projection::Rescaled { .. })
    }
}

/// Slack absorbing the rounding of Σλ after a rescale, so that a projected
/// matrix reads as inside on the next call.
fn slack(x: f64) -> f64 {
    1e-9 * x.abs().max(1.0)
}

pub fn apply_regularizer(rows: usize, cols: usize, weights: &mut [f64], state: &mut LayerState) -> Result<Outcome> {
    let lambda = svd_spectrum(rows, cols, weights).map_err(|e| Error::Train(e.to_string()))?;
    let trace: f64 = lambda.iter().sum();
    let Some(t_ref) = state.t_ref else {
        let vartheta = compute_vartheta(&lambda)?;
        *state = LayerState {
            t_ref: Some(trace),
            vartheta,
            lambda,
        };
        return Ok(Outcome {
            projection: Projection::Initialized,
            lo: trace - vartheta,
            hi: trace + vartheta,
            trace_before: trace,
            trace_after: trace,
            vartheta,
        });
    };
    let (lo, hi) = (t_ref - state.vartheta, t_ref + state.vartheta);
    let (projection, trace_after, lambda) = if trace >= lo - slack(lo) && trace <= hi + slack(hi) {
        (Projection::Inside, trace, lambda)
    } else if trace == 0.0 {
        (Projection::SkippedZero, trace, lambda)
    } else {
        let target = if trace > hi { hi } else { lo };
        let factor = target / trace;
        weights.iter_mut().for_each(|w| *w *= factor);
        let scaled: Vec<f64> = lambda.iter().map(|l| l * factor).collect();
        (Projection::Rescaled { factor }, scaled.iter().sum(), scaled)
    };
    let vartheta = compute_vartheta(&lambda)?;
    *state = LayerState {
        t_ref: Some(trace_after),
        vartheta,
        lambda,
    };
    Ok(Outcome {
        projection,
        lo,
        hi,
        trace_before: trace,
        trace_after,
        vartheta,
    })
}
