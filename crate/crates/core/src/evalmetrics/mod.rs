//! Reliability metrics (NNDR, IMS, DCR), marginal distances and the
//! machine-learning efficacy harness.

mod efficacy;
pub mod tree;

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

pub use efficacy::{
    macro_f1, ml_efficacy_classify, ml_efficacy_regress, polynomial_terms, r_squared, ClassifyReport, EfficacyConfig,
    FeatureMap, FoldScores, LeastSquares, RegressionReport, RegressionScores,
};

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, ColumnSchema, Field, Table};
use crate::seed;
use crate::transform::{TableEncoder, TransformConfig};

/// Absolute tolerance for continuous fields in exact-match checks.
pub const IMS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceSpace {
    /// Rows encoded by a table encoder fitted on the real table.
    Encoded,
    /// Min-max scaled continuous values plus a unit cost per categorical mismatch.
    RawMixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NndrDirection {
    /// Each synthetic row against its real neighbours.
    SynthToReal,
    /// Each real row against its synthetic neighbours.
    RealToSynth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub space: DistanceSpace,
    pub direction: NndrDirection,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig {
            space: DistanceSpace::Encoded,
            direction: NndrDirection::SynthToReal,
        }
    }
}

/// Maps rows of one schema to points in the configured metric space.
#[derive(Debug, Clone)]
pub enum Embedding {
    Encoded(Box<TableEncoder>),
    RawMixed { schema: Vec<ColumnSchema>, ranges: Vec<(f64, f64)> },
}

impl Embedding {
    /// Fits the space on `real`.
    pub fn fit(real: &Table, space: DistanceSpace, seed: u64) -> Result<Self> {
        if real.null_count() > 0 {
            return Err(Error::Eval("tables must be free of nulls; impute first".into()));
        }
        match space {
            DistanceSpace::Encoded => {
                let enc = TableEncoder::fit(real, &TransformConfig::default(), seed)
                    .map_err(|e| Error::Eval(format!("encoding the real table: {e}")))?;
                Ok(Embedding::Encoded(Box::new(enc)))
            }
            DistanceSpace::RawMixed => {
                let ranges = real
                    .schema()
                    .iter()
                    .enumerate()
                    .map(|(j, c)| match c.kind {
                        ColumnKind::Continuous => {
                            let v = real.real_values(j);
                            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            if lo.is_finite() {
                                (lo, hi)
                            } else {
                                (0.0, 0.0)
                            }
                        }
                        _ => (0.0, 0.0),
                    })
                    .collect();
                Ok(Embedding::RawMixed {
                    schema: real.schema().to_vec(),
                    ranges,
                })
            }
        }
    }

    pub fn embed(&self, table: &Table) -> Result<Vec<Vec<f64>>> {
        match self {
            Embedding::Encoded(enc) => Ok(enc.encode_table(table)?.rows),
            Embedding::RawMixed { schema, ranges } => {
                check_same_schema(schema, table.schema())?;
                let half = std::f64::consts::FRAC_1_SQRT_2;
                table
                    .rows()
                    .iter()
                    .map(|row| {
                        let mut p = Vec::new();
                        for ((f, c), &(lo, hi)) in row.iter().zip(schema).zip(ranges) {
                            match (c.kind, f) {
                                (ColumnKind::Continuous, Field::Real(v)) => {
                                    let span = hi - lo;
                                    p.push(if span > 0.0 { (v - lo) / span } else { 0.0 });
                                }
                                (_, Field::Category(i)) => {
                                    let mut one = vec![0.0; c.categories.len()];
                                    one[*i] = half;
                                    p.extend(one);
                                }
                                _ => return Err(Error::Eval(format!("unexpected field in column '{}'", c.name))),
                            }
                        }
                        Ok(p)
                    })
                    .collect()
            }
        }
    }
}

fn check_same_schema(a: &[ColumnSchema], b: &[ColumnSchema]) -> Result<()> {
    let same = a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| x.name == y.name && x.kind == y.kind && x.categories == y.categories);
    if same {
        Ok(())
    } else {
        Err(Error::Eval("real and synthetic tables have different schemas".into()))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Nearest and second-nearest distances from `q` to `refs` (needs ≥ 2 refs).
fn two_nearest(q: &[f64], refs: &[Vec<f64>]) -> (f64, f64) {
    let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
    for r in refs {
        let d = dist(q, r);
        if d < d1 {
            d2 = d1;
            d1 = d;
        } else if d < d2 {
            d2 = d;
        }
    }
    (d1, d2)
}

/// Mean nearest / second-nearest distance ratio; 0/0 reads as 0.
pub fn nndr(real: &[Vec<f64>], synth: &[Vec<f64>], direction: NndrDirection) -> Result<f64> {
    let (queries, refs, what) = match direction {
        NndrDirection::SynthToReal => (synth, real, "real"),
        NndrDirection::RealToSynth => (real, synth, "synthetic"),
    };
    if refs.len() < 2 {
        return Err(Error::Eval(format!("NNDR needs at least 2 {what} rows")));
    }
    if queries.is_empty() {
        return Err(Error::Eval("NNDR needs at least one query row".into()));
    }
    let total: f64 = queries
        .iter()
        .map(|q| {
            let (d1, d2) = two_nearest(q, refs);
            if d2 > 0.0 {
                d1 / d2
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / queries.len() as f64)
}

/// Fraction of synthetic rows that equal some real row in every field.
pub fn ims(real: &Table, synth: &Table) -> Result<f64> {
    check_same_schema(real.schema(), synth.schema())?;
    if synth.is_empty() {
        return Err(Error::Eval("IMS needs at least one synthetic row".into()));
    }
    let key = |row: &[Field]| -> Vec<Option<usize>> {
        row.iter()
            .map(|f| match f {
                Field::Category(i) => Some(*i),
                _ => None,
            })
            .collect()
    };
    let mut groups: HashMap<Vec<Option<usize>>, Vec<&[Field]>> = HashMap::new();
    for row in real.rows() {
        groups.entry(key(row)).or_default().push(row);
    }
    let same = |a: &[Field], b: &[Field]| {
        a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Field::Real(u), Field::Real(v)) => (u - v).abs() <= IMS_TOLERANCE,
            _ => x == y,
        })
    };
    let hits = synth
        .rows()
        .iter()
        .filter(|row| groups.get(&key(row)).is_some_and(|g| g.iter().any(|r| same(r, row))))
        .count();
    Ok(hits as f64 / synth.n_rows() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dcr {
    pub score: f64,
    /// Every nearest distance was identical, so min-max normalization was undefined.
    pub degenerate: bool,
    pub distances: Vec<f64>,
}

/// Mean of the min-max normalized nearest-real distances of synthetic rows.
pub fn dcr(real: &[Vec<f64>], synth: &[Vec<f64>]) -> Result<Dcr> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Eval("DCR needs non-empty real and synthetic sets".into()));
    }
    let distances: Vec<f64> = synth
        .iter()
        .map(|s| real.iter().map(|r| dist(s, r)).fold(f64::INFINITY, f64::min))
        .collect();
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(Dcr {
            score: 0.0,
            degenerate: true,
            distances,
        });
    }
    let score = distances.iter().map(|d| (d - lo) / (hi - lo)).sum::<f64>() / distances.len() as f64;
    Ok(Dcr {
        score,
        degenerate: false,
        distances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginalKind {
    KolmogorovSmirnov,
    TotalVariation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub column: String,
    pub kind: MarginalKind,
    pub value: f64,
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Eval("KS statistic needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Total-variation distance between category frequencies.
pub fn tv_distance(a: &[usize], b: &[usize], n_categories: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Eval("TV distance needs two non-empty samples".into()));
    }
    let freq = |v: &[usize]| {
        let mut f = vec![0.0; n_categories];
        for &c in v {
            f[c] += 1.0 / v.len() as f64;
        }
        f
    };
    let (fa, fb) = (freq(a), freq(b));
    Ok(0.5 * fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// KS per continuous column and TV per categorical column.
pub fn marginal_distance(real: &Table, synth: &Table) -> Result<Vec<Marginal>> {
    check_same_schema(real.schema(), synth.schema())?;
    real.schema()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let (kind, value) = match c.kind {
                ColumnKind::Continuous => (
                    MarginalKind::KolmogorovSmirnov,
                    ks_statistic(&real.real_values(j), &synth.real_values(j))?,
                ),
                _ => {
                    let cats = |t: &Table| t.column(j).filter_map(Field::as_category).collect::<Vec<_>>();
                    (
                        MarginalKind::TotalVariation,
                        tv_distance(&cats(real), &cats(synth), c.categories.len())?,
                    )
                }
            };
            Ok(Marginal {
                column: c.name.clone(),
                kind,
                value,
            })
        })
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityConfig {
    pub distance: DistanceConfig,
    pub scales: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig {
            distance: DistanceConfig::default(),
            scales: vec![0.5, 1.0],
            repeats: 10,
            seed: 0,
        }
    }
}

/// Metrics at one scale, averaged over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub scale: f64,
    pub repeats: usize,
    pub nndr: Stat,
    pub ims: Stat,
    pub dcr: Stat,
    /// Repeats whose DCR normalization was degenerate.
    pub dcr_degenerate: usize,
}

/// Draws ⌈scale·n⌉ rows (all rows at scale 1) from both tables per repeat.
pub fn reliability(real: &Table, synth: &Table, cfg: &ReliabilityConfig) -> Result<Vec<ReliabilityReport>> {
    check_same_schema(real.schema(), synth.schema())?;
    if cfg.repeats == 0 {
        return Err(Error::Eval("at least one repeat is required".into()));
    }
    if let Some(s) = cfg.scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(Error::Eval(format!("scale {s} outside (0, 1]")));
    }
    let emb = Embedding::fit(real, cfg.distance.space, seed::derive(cfg.seed, "eval-embedding"))?;
    let real_pts = emb.embed(real)?;
    let synth_pts = emb.embed(synth)?;
    let mut out = Vec::new();
    for (si, &scale) in cfg.scales.iter().enumerate() {
        let (mut n, mut m, mut d) = (Vec::new(), Vec::new(), Vec::new());
        let mut degenerate = 0;
        for r in 0..cfg.repeats {
            let s = seed::derive_indexed(seed::derive_indexed(cfg.seed, "eval-scale", si as u64), "repeat", r as u64);
            let mut rng = seed::rng(s);
            let mut pick = |len: usize| -> Vec<usize> {
                if scale >= 1.0 {
                    return (0..len).collect();
                }
                let k = ((scale * len as f64).ceil() as usize).clamp(1, len);
                let mut idx = sample_indices(&mut rng, len, k).into_vec();
                idx.sort_unstable();
                idx
            };
            let ri = pick(real.n_rows());
            let si_ = pick(synth.n_rows());
            let rp: Vec<Vec<f64>> = ri.iter().map(|&i| real_pts[i].clone()).collect();
            let sp: Vec<Vec<f64>> = si_.iter().map(|&i| synth_pts[i].clone()).collect();
            n.push(nndr(&rp, &sp, cfg.distance.direction)?);
            m.push(ims(&real.select_rows(&ri), &synth.select_rows(&si_))?);
            let dc = dcr(&rp, &sp)?;
            degenerate += usize::from(dc.degenerate);
            d.push(dc.score);
        }
        out.push(ReliabilityReport {
            scale,
            repeats: cfg.repeats,
            nndr: Stat::of(&n),
            ims: Stat::of(&m),
            dcr: Stat::of(&d),
            dcr_degenerate: degenerate,
        });
    }
    Ok(out)
}
