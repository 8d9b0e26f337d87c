//! Per-column encoders and the row layout fed to the networks.
//!
//! Continuous columns are standardized, fitted with a pruned Gaussian mixture
//! and reparameterized (see [`nvmm`]); they encode as a mode one-hot plus one
//! clipped scalar. Discrete and binary columns encode as ±1 one-hots.

pub mod encoder;
pub mod nvmm;
pub mod vgm;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encoder::{argmax_first, CategoricalEncoder, ContinuousEncoder, ContinuousFitOptions, Standardizer};
pub use nvmm::{reparameterize_nvmm, satisfies_separation, NvmmParams};
pub use vgm::{fit_vgm, fit_vgm_traced, GaussianMode, VgmFit, VgmModel, VgmOptions};

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, ColumnSchema, Field, Table};
use crate::seed;

pub const ENCODER_FORMAT_VERSION: u32 = 1;

/// How a stretch of the encoded row is activated and decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Continuous mode selector, 0/1 one-hot.
    ModeOneHot,
    /// Discrete/binary category, ±1 one-hot.
    CategoryOneHot,
    /// Continuous within-mode scalar in [−1, 1].
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub offset: usize,
    pub width: usize,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub offset: usize,
    pub width: usize,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub columns: Vec<ColumnLayout>,
    pub segments: Vec<Segment>,
    pub width: usize,
}

/// A batch of encoded rows sharing one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRows {
    pub layout: Layout,
    pub rows: Vec<Vec<f64>>,
}

impl EncodedRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnEncoder {
    Continuous(ContinuousEncoder),
    Categorical(CategoricalEncoder),
}

impl ColumnEncoder {
    pub fn width(&self) -> usize {
        match self {
            ColumnEncoder::Continuous(e) => e.width(),
            ColumnEncoder::Categorical(e) => e.width(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub m_c: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub epsilon: f64,
    pub max_retries: usize,
    pub clip_width: f64,
    pub standardize: bool,
    pub cover_training: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            m_c: 10,
            max_iter: 200,
            tol: 1e-6,
            epsilon: nvmm::DEFAULT_EPSILON,
            max_retries: nvmm::DEFAULT_MAX_RETRIES,
            clip_width: encoder::DEFAULT_CLIP_WIDTH,
            standardize: true,
            cover_training: true,
        }
    }
}

impl TransformConfig {
    fn continuous_options(&self) -> ContinuousFitOptions {
        ContinuousFitOptions {
            vgm: VgmOptions {
                m_c: self.m_c,
                max_iter: self.max_iter,
                tol: self.tol,
            },
            epsilon: self.epsilon,
            max_retries: self.max_retries,
            clip_width: self.clip_width,
            standardize: self.standardize,
            cover_training: self.cover_training,
        }
    }
}

/// Fitted encoders for every column of one schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEncoder {
    pub format_version: u32,
    pub schema: Vec<ColumnSchema>,
    pub columns: Vec<ColumnEncoder>,
    pub layout: Layout,
}

impl TableEncoder {
    /// Fits one encoder per column; continuous column `j` uses the sub-seed
    /// `derive_indexed(seed, "column", j)`.
    pub fn fit(table: &Table, cfg: &TransformConfig, seed: u64) -> Result<Self> {
        let opts = cfg.continuous_options();
        let mut columns = Vec::with_capacity(table.n_cols());
        for (j, col) in table.schema().iter().enumerate() {
            let enc = match col.kind {
                ColumnKind::Continuous => {
                    let values = table.real_values(j);
                    if values.is_empty() {
                        return Err(Error::Transform(format!("column '{}' has no values to fit", col.name)));
                    }
                    let sub = seed::derive_indexed(seed, "column", j as u64);
                    let enc = ContinuousEncoder::fit(&values, &opts, sub)
                        .map_err(|e| Error::Transform(format!("column '{}': {e}", col.name)))?;
                    ColumnEncoder::Continuous(enc)
                }
                _ => ColumnEncoder::Categorical(CategoricalEncoder::new(col.categories.clone())),
            };
            columns.push(enc);
        }
        Ok(Self::from_parts(table.schema().to_vec(), columns))
    }

    pub fn from_parts(schema: Vec<ColumnSchema>, columns: Vec<ColumnEncoder>) -> Self {
        let layout = build_layout(&schema, &columns);
        TableEncoder {
            format_version: ENCODER_FORMAT_VERSION,
            schema,
            columns,
            layout,
        }
    }

    pub fn width(&self) -> usize {
        self.layout.width
    }

    fn check_schema(&self, schema: &[ColumnSchema]) -> Result<()> {
        let same = schema.len() == self.schema.len()
            && schema
                .iter()
                .zip(&self.schema)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.categories == b.categories);
        if same {
            Ok(())
        } else {
            Err(Error::Transform("table schema does not match the fitted encoders".into()))
        }
    }

    pub fn encode_row(&self, row: &[Field]) -> Result<Vec<f64>> {
        if row.len() != self.columns.len() {
            return Err(Error::Transform(format!(
                "row has {} fields, encoders cover {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        let mut out = Vec::with_capacity(self.width());
        for ((field, enc), col) in row.iter().zip(&self.columns).zip(&self.schema) {
            match (field, enc) {
                (Field::Real(v), ColumnEncoder::Continuous(e)) => out.extend(e.encode(*v)?),
                (Field::Category(c), ColumnEncoder::Categorical(e)) => out.extend(e.encode(*c)?),
                (Field::Null, _) => {
                    return Err(Error::Transform(format!(
                        "null in column '{}'; impute before encoding",
                        col.name
                    )))
                }
                _ => return Err(Error::Transform(format!("field kind mismatch in column '{}'", col.name))),
            }
        }
        Ok(out)
    }

    pub fn encode_table(&self, table: &Table) -> Result<EncodedRows> {
        self.check_schema(table.schema())?;
        let rows = table.rows().iter().map(|r| self.encode_row(r)).collect::<Result<_>>()?;
        Ok(EncodedRows {
            layout: self.layout.clone(),
            rows,
        })
    }

    pub fn decode_row(&self, v: &[f64]) -> Result<Vec<Field>> {
        if v.len() != self.width() {
            return Err(Error::Transform(format!(
                "encoded row has width {}, layout expects {}",
                v.len(),
                self.width()
            )));
        }
        self.columns
            .iter()
            .zip(&self.layout.columns)
            .map(|(enc, cl)| {
                let seg = &v[cl.offset..cl.offset + cl.width];
                Ok(match enc {
                    ColumnEncoder::Continuous(e) => Field::Real(e.decode(seg)?),
                    ColumnEncoder::Categorical(e) => Field::Category(e.decode(seg)?),
                })
            })
            .collect()
    }

    pub fn decode_rows(&self, rows: &[Vec<f64>]) -> Result<Table> {
        let decoded = rows.iter().map(|r| self.decode_row(r)).collect::<Result<_>>()?;
        Table::new(self.schema.clone(), decoded)
    }

    pub fn decode_table(&self, encoded: &EncodedRows) -> Result<Table> {
        if encoded.layout != self.layout {
            return Err(Error::Transform("encoded rows carry a different layout".into()));
        }
        self.decode_rows(&encoded.rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let enc: TableEncoder = serde_json::from_str(&text)?;
        if enc.format_version != ENCODER_FORMAT_VERSION {
            return Err(Error::Transform(format!(
                "encoder format version {} unsupported (expected {ENCODER_FORMAT_VERSION})",
                enc.format_version
            )));
        }
        Ok(enc)
    }
}

fn build_layout(schema: &[ColumnSchema], columns: &[ColumnEncoder]) -> Layout {
    let mut offset = 0;
    let mut cols = Vec::with_capacity(columns.len());
    let mut segments = Vec::new();
    for (col, enc) in schema.iter().zip(columns) {
        let width = enc.width();
        cols.push(ColumnLayout {
            offset,
            width,
            kind: col.kind,
        });
        match enc {
            ColumnEncoder::Continuous(_) => {
                segments.push(Segment {
                    offset,
                    width: width - 1,
                    kind: SegmentKind::ModeOneHot,
                });
                segments.push(Segment {
                    offset: offset + width - 1,
                    width: 1,
                    kind: SegmentKind::Scalar,
                });
            }
            ColumnEncoder::Categorical(_) => segments.push(Segment {
                offset,
                width,
                kind: SegmentKind::CategoryOneHot,
            }),
        }
        offset += width;
    }
    Layout {
        columns: cols,
        segments,
        width: offset,
    }
}
