//! Singular-value stability metric over weight matrices and onset detection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AGGREGATE: &str = "aggregate";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Fraction of the spectrum entering the ratio sum; 0.05..=0.15.
    pub c_s: f64,
    pub b_0: f64,
    pub window: usize,
    pub spike_factor: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            c_s: 0.1,
            b_0: 0.0,
            window: 20,
            spike_factor: 3.0,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.05..=0.15).contains(&self.c_s) {
            return Err(Error::Config(format!("c_s must lie in [0.05, 0.15], got {}", self.c_s)));
        }
        if self.window < 2 {
            return Err(Error::Config("onset window must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdSnapshot {
    pub iteration: usize,
    pub layer: String,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub m_r: usize,
    pub metric: f64,
}

impl SvdSnapshot {
    pub fn new(iteration: usize, layer: impl Into<String>, rows: usize, cols: usize, data: &[f64], cfg: &MonitorConfig) -> Result<Self> {
        let sv = svd_spectrum(rows, cols, data)?;
        let metric = stability_metric(&sv, cfg.c_s, cfg.b_0)?;
        Ok(SvdSnapshot {
            iteration,
            layer: layer.into(),
            m_r: sv.len(),
            singular_values: sv,
            metric,
        })
    }
}

/// Singular values of a row-major `rows × cols` matrix, descending.
pub fn svd_spectrum(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>> {
    if data.len() != rows * cols || data.is_empty() {
        return Err(Error::Monitor(format!(
            "matrix {rows}x{cols} does not match {} values",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Monitor("matrix has non-finite entries".into()));
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let svd = m
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Monitor("SVD did not converge".into()))?;
    let mut sv: Vec<f64> = svd.singular_values.iter().map(|v| v.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of ratio terms beyond the anchor: max(1, round(c_s · m_r)).
pub fn ratio_terms(m_r: usize, c_s: f64) -> usize {
    ((c_s * m_r as f64).round() as usize).max(1)
}

/// ϱ = ϱ_0 + Σ_{i=0..m̂} ϱ_i / (ϱ_{i+1} + 1) + b_0, with m̂ from
/// [`ratio_terms`]. Entries past the end of the spectrum read as zero.
pub fn stability_metric(spectrum: &[f64], c_s: f64, b_0: f64) -> Result<f64> {
    if spectrum.is_empty() {
        return Err(Error::Monitor("empty spectrum".into()));
    }
    let at = |i: usize| spectrum.get(i).copied().unwrap_or(0.0);
    let m_hat = ratio_terms(spectrum.len(), c_s);
    let sum: f64 = (0..=m_hat).map(|i| at(i) / (at(i + 1) + 1.0)).sum();
    Ok(spectrum[0] + sum + b_0)
}

/// First index t ≥ window where series[t] exceeds the mean of the preceding
/// `window` values by more than k standard deviations.
pub fn detect_onset(series: &[f64], window: usize, k: f64) -> Result<Option<usize>> {
    if window < 2 {
        return Err(Error::Monitor("onset window must be at least 2".into()));
    }
    if series.len() < window + 1 {
        return Err(Error::Monitor(format!(
            "series has {} points but window {window} needs at least {}; lower --window",
            series.len(),
            window + 1
        )));
    }
    for t in window..series.len() {
        let prev = &series[t - window..t];
        let mean = prev.iter().sum::<f64>() / window as f64;
        let var = prev.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / window as f64;
        if series[t] > mean + k * var.sqrt() {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Per-iteration mean of the metric over layers.
pub fn aggregate_series(snapshots: &[SvdSnapshot]) -> Vec<(usize, f64)> {
    let mut by_iter: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in snapshots {
        let e = by_iter.entry(s.iteration).or_insert((0.0, 0));
        e.0 += s.metric;
        e.1 += 1;
    }
    by_iter.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect()
}

/// Writes `iteration,layer,rho,aggregate`, one line per snapshot, where
/// `aggregate` is the mean metric over layers at that iteration.
pub fn export_series(snapshots: &[SvdSnapshot], path: &Path) -> Result<()> {
    if snapshots.is_empty() {
        return Err(Error::Monitor("no snapshots to export".into()));
    }
    let agg: BTreeMap<usize, f64> = aggregate_series(snapshots).into_iter().collect();
    let mut out = String::from("iteration,layer,rho,aggregate\n");
    for s in snapshots {
        writeln!(out, "{},{},{:e},{:e}", s.iteration, s.layer, s.metric, agg[&s.iteration]).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-layer (iteration, ϱ) series read from any CSV with `iteration`,
/// `layer` and `rho` columns.
pub fn read_series(path: &Path) -> Result<BTreeMap<String, Vec<(usize, f64)>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Monitor(format!("cannot read {}: {e}", path.display())),
        _ => Error::Csv(e),
    })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Monitor(format!("series CSV lacks a '{name}' column")))
    };
    let (ci, cl, cr) = (col("iteration")?, col("layer")?, col("rho")?);
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Monitor(format!("malformed series row {}", line + 2));
        let it: usize = rec.get(ci).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let rho: f64 = rec.get(cr).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let layer = rec.get(cl).ok_or_else(bad)?.to_string();
        series.entry(layer).or_default().push((it, rho));
    }
    if series.is_empty() {
        return Err(Error::Monitor("series CSV has no data rows".into()));
    }
    for s in series.values_mut() {
        s.sort_by_key(|p| p.0);
    }
    Ok(series)
}

/// Onset iteration per layer plus the layer-mean aggregate (listed last).
pub fn onset_report(series: &BTreeMap<String, Vec<(usize, f64)>>, window: usize, k: f64) -> Result<Vec<(String, Option<usize>)>> {
    let mut agg: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut out = Vec::new();
    for (layer, pts) in series {
        for (i, v) in pts {
            let e = agg.entry(*i).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let vals: Vec<f64> = pts.iter().map(|p| p.1).collect();
        out.push((layer.clone(), detect_onset(&vals, window, k)?.map(|t| pts[t].0)));
    }
    let agg: Vec<(usize, f64)> = agg.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect();
    let vals: Vec<f64> = agg.iter().map(|p| p.1).collect();
    out.push((AGGREGATE.to_string(), detect_onset(&vals, window, k)?.map(|t| agg[t].0)));
    Ok(out)
}
