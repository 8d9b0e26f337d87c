//! Typed tables: CSV ingestion, column-kind inference, null imputation and
//! train/holdout splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Distinct-value count above which an all-numeric column is continuous.
pub const DEFAULT_CARDINALITY_THRESHOLD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Discrete,
    Binary,
}

impl ColumnKind {
    pub fn is_categorical(self) -> bool {
        !matches!(self, ColumnKind::Continuous)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Feature,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Category labels in their persisted order; empty for continuous columns.
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub role: Option<Role>,
}

impl ColumnSchema {
    pub fn continuous(name: impl Into<String>) -> Self {
        ColumnSchema {
            name: name.into(),
            kind: ColumnKind::Continuous,
            categories: Vec::new(),
            role: None,
        }
    }

    /// Categorical column; the kind is binary for two labels, discrete otherwise.
    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        let categories: Vec<String> = categories.into_iter().map(Into::into).collect();
        let kind = if categories.len() == 2 {
            ColumnKind::Binary
        } else {
            ColumnKind::Discrete
        };
        ColumnSchema {
            name: name.into(),
            kind,
            categories,
            role: None,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Schema("empty column name".into()));
        }
        let unique: BTreeSet<&String> = self.categories.iter().collect();
        if unique.len() != self.categories.len() {
            return Err(Error::Schema(format!("column '{}' has duplicate category labels", self.name)));
        }
        match self.kind {
            ColumnKind::Continuous if !self.categories.is_empty() => Err(Error::Schema(format!(
                "continuous column '{}' cannot carry categories",
                self.name
            ))),
            ColumnKind::Binary if self.categories.len() != 2 => Err(Error::Schema(format!(
                "binary column '{}' needs exactly 2 categories, has {}",
                self.name,
                self.categories.len()
            ))),
            ColumnKind::Discrete if self.categories.len() < 2 => Err(Error::Schema(format!(
                "discrete column '{}' needs at least 2 categories, has {}",
                self.name,
                self.categories.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// One cell of a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Field {
    Real(f64),
    Category(usize),
    Null,
}

impl Field {
    pub fn is_null(&self) -> bool {
        matches!(self, Field::Null)
    }

    pub fn as_real(&self) -> Option<f64> {
        match *self {
            Field::Real(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_category(&self) -> Option<usize> {
        match *self {
            Field::Category(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Vec<ColumnSchema>,
    rows: Vec<Vec<Field>>,
}

impl Table {
    /// Builds a table, checking that every row is aligned to the schema and
    /// that each field matches its column kind.
    pub fn new(schema: Vec<ColumnSchema>, rows: Vec<Vec<Field>>) -> Result<Self> {
        for col in &schema {
            col.validate()?;
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "row {i} has {} fields, schema has {} columns",
                    row.len(),
                    schema.len()
                )));
            }
            for (field, col) in row.iter().zip(&schema) {
                match (field, col.kind) {
                    (Field::Null, _) => {}
                    (Field::Real(v), ColumnKind::Continuous) if v.is_finite() => {}
                    (Field::Category(c), k) if k.is_categorical() && *c < col.categories.len() => {}
                    _ => {
                        return Err(Error::Schema(format!(
                            "row {i}: field {field:?} invalid for column '{}'",
                            col.name
                        )))
                    }
                }
            }
        }
        Ok(Table { schema, rows })
    }

    pub fn schema(&self) -> &[ColumnSchema] {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Field>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = &Field> + '_ {
        self.rows.iter().map(move |r| &r[j])
    }

    /// Non-null real values of a continuous column.
    pub fn real_values(&self, j: usize) -> Vec<f64> {
        self.column(j).filter_map(Field::as_real).collect()
    }

    pub fn null_count(&self) -> usize {
        self.rows.iter().flatten().filter(|f| f.is_null()).count()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Writes the table as CSV with the schema's header. Reals use Rust's
    /// shortest round-trip formatting, so output bytes are stable.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.schema.iter().map(|c| c.name.as_str()))?;
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&self.schema)
                .map(|(f, c)| match f {
                    Field::Real(v) => format!("{v}"),
                    Field::Category(k) => c.categories[*k].clone(),
                    Field::Null => String::new(),
                })
                .collect();
            w.write_record(&cells)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Per-column overrides applied on top of inference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnOverride {
    #[serde(default)]
    pub kind: Option<ColumnKind>,
    #[serde(default)]
    pub categories: Option<Vec<String>>,
    #[serde(default)]
    pub role: Option<Role>,
}

/// Schema override document: column name → override. Persisted as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaOverrides {
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnOverride>,
}

impl SchemaOverrides {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn set_kind(mut self, column: &str, kind: ColumnKind) -> Self {
        self.columns.entry(column.to_string()).or_default().kind = Some(kind);
        self
    }

    pub fn set_role(mut self, column: &str, role: Role) -> Self {
        self.columns.entry(column.to_string()).or_default().role = Some(role);
        self
    }
}

fn parse_real(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_null_cell(cell: &str) -> bool {
    cell.trim().is_empty()
}

/// Orders category labels numerically when they all parse as reals,
/// lexicographically otherwise.
fn order_categories(labels: BTreeSet<String>) -> Vec<String> {
    let mut labels: Vec<String> = labels.into_iter().collect();
    if labels.iter().all(|l| parse_real(l).is_some()) {
        labels.sort_by(|a, b| parse_real(a).unwrap().total_cmp(&parse_real(b).unwrap()).then(a.cmp(b)));
    }
    labels
}

/// Infers column kinds from raw text cells.
///
/// A column is continuous iff every non-null cell parses as a finite real and
/// it has more than `cardinality_threshold` distinct values; otherwise binary
/// with exactly two distinct values, else discrete. A single-valued numeric
/// column is continuous. Overrides win over inference.
pub fn infer_schema(
    header: &[String],
    raw_rows: &[Vec<String>],
    overrides: &SchemaOverrides,
    cardinality_threshold: usize,
) -> Result<Vec<ColumnSchema>> {
    if raw_rows.is_empty() {
        return Err(Error::Schema("no data rows to infer a schema from".into()));
    }
    for (i, row) in raw_rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Schema(format!(
                "ragged row {i}: {} cells, header has {}",
                row.len(),
                header.len()
            )));
        }
    }
    for name in overrides.columns.keys() {
        if !header.contains(name) {
            return Err(Error::Schema(format!("override names unknown column '{name}'")));
        }
    }

    let mut schema = Vec::with_capacity(header.len());
    for (j, name) in header.iter().enumerate() {
        if name.trim().is_empty() {
            return Err(Error::Schema(format!("column {j} has an empty name")));
        }
        let distinct: BTreeSet<String> = raw_rows
            .iter()
            .map(|r| r[j].trim())
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect();
        if distinct.is_empty() {
            return Err(Error::Schema(format!("column '{name}' has no non-null cells")));
        }
        let numeric = distinct.iter().all(|c| parse_real(c).is_some());
        let ov = overrides.columns.get(name).cloned().unwrap_or_default();

        let inferred = if numeric && (distinct.len() > cardinality_threshold || distinct.len() == 1) {
            ColumnKind::Continuous
        } else if distinct.len() == 2 {
            ColumnKind::Binary
        } else {
            ColumnKind::Discrete
        };
        let kind = ov.kind.unwrap_or(inferred);
        let categories = match kind {
            ColumnKind::Continuous => Vec::new(),
            _ => ov.categories.clone().unwrap_or_else(|| order_categories(distinct)),
        };
        let col = ColumnSchema {
            name: name.clone(),
            kind,
            categories,
            role: ov.role,
        };
        col.validate()?;
        schema.push(col);
    }
    Ok(schema)
}

/// Reads a CSV file (header row required) into raw text cells.
pub fn read_raw_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(Error::Schema(format!("{}: empty file", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Parses raw cells against a schema; unparseable cells become null.
pub fn parse_rows(schema: &[ColumnSchema], raw_rows: &[Vec<String>]) -> Result<Table> {
    let mut rows = Vec::with_capacity(raw_rows.len());
    for (i, raw) in raw_rows.iter().enumerate() {
        if raw.len() != schema.len() {
            return Err(Error::Schema(format!(
                "ragged row {i}: {} cells, schema has {} columns",
                raw.len(),
                schema.len()
            )));
        }
        let row = raw
            .iter()
            .zip(schema)
            .map(|(cell, col)| {
                if is_null_cell(cell) {
                    return Field::Null;
                }
                match col.kind {
                    ColumnKind::Continuous => parse_real(cell).map_or(Field::Null, Field::Real),
                    _ => col.category_index(cell.trim()).map_or(Field::Null, Field::Category),
                }
            })
            .collect();
        rows.push(row);
    }
    Table::new(schema.to_vec(), rows)
}

/// Loads a CSV into a typed table. With `schema = None` the schema is
/// inferred (applying `overrides`); otherwise header names must match it.
pub fn load_csv(path: &Path, schema: Option<&[ColumnSchema]>, overrides: &SchemaOverrides) -> Result<Table> {
    let (header, raw) = read_raw_csv(path)?;
    let schema = match schema {
        Some(s) => {
            let names: Vec<&str> = s.iter().map(|c| c.name.as_str()).collect();
            if names != header.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::Schema(format!(
                    "header {header:?} does not match schema columns {names:?}"
                )));
            }
            s.to_vec()
        }
        None => infer_schema(&header, &raw, overrides, DEFAULT_CARDINALITY_THRESHOLD)?,
    };
    parse_rows(&schema, &raw)
}

/// Replaces every null: continuous cells by a uniform draw over the column's
/// observed [min, max], categorical cells by a uniformly drawn category.
/// Column `j` draws from its own stream derived from `seed`.
pub fn impute_nulls(table: &Table, seed: u64) -> Result<Table> {
    let mut rows = table.rows.clone();
    for (j, col) in table.schema.iter().enumerate() {
        if !rows.iter().any(|r| r[j].is_null()) {
            continue;
        }
        let mut rng = seed::rng(seed::derive_indexed(seed, "impute", j as u64));
        match col.kind {
            ColumnKind::Continuous => {
                let vals = table.real_values(j);
                if vals.is_empty() {
                    return Err(Error::Schema(format!(
                        "column '{}' is entirely null; no range to impute from",
                        col.name
                    )));
                }
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for row in rows.iter_mut().filter(|r| r[j].is_null()) {
                    let u: f64 = rng.random();
                    row[j] = Field::Real(lo + (hi - lo) * u);
                }
            }
            _ => {
                let k = col.categories.len();
                if table.column(j).all(Field::is_null) {
                    return Err(Error::Schema(format!("column '{}' is entirely null", col.name)));
                }
                for row in rows.iter_mut().filter(|r| r[j].is_null()) {
                    row[j] = Field::Category(rng.random_range(0..k));
                }
            }
        }
    }
    Table::new(table.schema.clone(), rows)
}

/// Random disjoint split into ⌊ratio·n⌋ training rows and the remainder.
/// Each side keeps the original row order.
pub fn split_train_holdout(table: &Table, ratio: f64, seed: u64) -> Result<(Table, Table)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Schema(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = table.n_rows();
    if n < 2 {
        return Err(Error::Schema(format!("cannot split a table of {n} rows")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let n_train = (ratio * n as f64).floor() as usize;
    let (a, b) = idx.split_at_mut(n_train);
    a.sort_unstable();
    b.sort_unstable();
    Ok((table.select_rows(a), table.select_rows(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn strings(rows: &[&[&str]]) -> Vec<Vec<String>> {
        rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect()
    }

    fn header(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_one_column_is_binary() {
        let rows: Vec<Vec<String>> = (0..50).map(|i| vec![(i % 2).to_string()]).collect();
        let s = infer_schema(&header(&["flag"]), &rows, &SchemaOverrides::default(), 20).unwrap();
        assert_eq!(s[0].kind, ColumnKind::Binary);
        assert_eq!(s[0].categories, vec!["0", "1"]);
    }

    #[test]
    fn many_distinct_reals_are_continuous() {
        let rows: Vec<Vec<String>> = (0..1000).map(|i| vec![format!("{}", i as f64 * 0.37)]).collect();
        let s = infer_schema(&header(&["x"]), &rows, &SchemaOverrides::default(), 20).unwrap();
        assert_eq!(s[0].kind, ColumnKind::Continuous);
        assert!(s[0].categories.is_empty());
    }

    #[test]
    fn override_beats_inference() {
        let rows: Vec<Vec<String>> = (0..100).map(|i| vec![(1 + i % 5).to_string()]).collect();
        let plain = infer_schema(&header(&["n"]), &rows, &SchemaOverrides::default(), 20).unwrap();
        assert_eq!(plain[0].kind, ColumnKind::Discrete);
        assert_eq!(plain[0].categories, vec!["1", "2", "3", "4", "5"]);
        let ov = SchemaOverrides::default().set_kind("n", ColumnKind::Continuous);
        let s = infer_schema(&header(&["n"]), &rows, &ov, 20).unwrap();
        assert_eq!(s[0].kind, ColumnKind::Continuous);
    }

    #[test]
    fn numeric_categories_sort_numerically() {
        let rows = strings(&[&["10"], &["9"], &["2"]]);
        let s = infer_schema(&header(&["n"]), &rows, &SchemaOverrides::default(), 20).unwrap();
        assert_eq!(s[0].categories, vec!["2", "9", "10"]);
    }

    #[test]
    fn inference_errors() {
        let ragged = strings(&[&["1", "2"], &["3"]]);
        assert!(infer_schema(&header(&["a", "b"]), &ragged, &SchemaOverrides::default(), 20).is_err());
        let rows = strings(&[&["1", "2"]]);
        assert!(infer_schema(&header(&["a", " "]), &rows, &SchemaOverrides::default(), 20).is_err());
        let nulls = strings(&[&["1", ""], &["2", ""]]);
        assert!(infer_schema(&header(&["a", "b"]), &nulls, &SchemaOverrides::default(), 20).is_err());
        assert!(infer_schema(&header(&["a"]), &[], &SchemaOverrides::default(), 20).is_err());
    }

    #[test]
    fn inference_is_idempotent() {
        let rows: Vec<Vec<String>> = (0..200)
            .map(|i| vec![format!("{}", (i as f64).sin() * 3.0), ["a", "b", "c"][i % 3].into(), (i % 2).to_string()])
            .collect();
        let h = header(&["x", "c", "b"]);
        let s1 = infer_schema(&h, &rows, &SchemaOverrides::default(), 20).unwrap();
        let t = parse_rows(&s1, &rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        let (h2, raw2) = read_raw_csv(&p).unwrap();
        let s2 = infer_schema(&h2, &raw2, &SchemaOverrides::default(), 20).unwrap();
        assert_eq!(s1, s2);
    }

    fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn load_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "a.csv", "x,y\n1.5,yes\n2.5,no\n3.5,yes\n");
        let schema = vec![ColumnSchema::continuous("x"), ColumnSchema::categorical("y", ["no", "yes"])];
        let t = load_csv(&p, Some(&schema), &SchemaOverrides::default()).unwrap();
        assert_eq!((t.n_rows(), t.n_cols()), (3, 2));
        assert_eq!(t.rows()[0], vec![Field::Real(1.5), Field::Category(1)]);
    }

    #[test]
    fn unparseable_cell_becomes_null() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "a.csv", "x,y\n1.5,yes\nabc,no\n3.5,yes\n");
        let schema = vec![ColumnSchema::continuous("x"), ColumnSchema::categorical("y", ["no", "yes"])];
        let t = load_csv(&p, Some(&schema), &SchemaOverrides::default()).unwrap();
        assert_eq!(t.rows()[1][0], Field::Null);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write_file(&dir, "e.csv", "");
        assert!(load_csv(&empty, None, &SchemaOverrides::default()).is_err());
        assert!(load_csv(&dir.path().join("missing.csv"), None, &SchemaOverrides::default()).is_err());
        let p = write_file(&dir, "a.csv", "x,z\n1,2\n");
        let schema = vec![ColumnSchema::continuous("x"), ColumnSchema::continuous("y")];
        assert!(load_csv(&p, Some(&schema), &SchemaOverrides::default()).is_err());
    }

    fn toy_with_nulls() -> Table {
        let schema = vec![ColumnSchema::continuous("x"), ColumnSchema::categorical("b", ["0", "1"])];
        let rows = vec![
            vec![Field::Real(0.0), Field::Category(0)],
            vec![Field::Null, Field::Null],
            vec![Field::Real(10.0), Field::Category(1)],
        ];
        Table::new(schema, rows).unwrap()
    }

    #[test]
    fn impute_identity_without_nulls() {
        let schema = vec![ColumnSchema::continuous("x")];
        let t = Table::new(schema, vec![vec![Field::Real(1.0)], vec![Field::Real(2.0)]]).unwrap();
        assert_eq!(impute_nulls(&t, 3).unwrap(), t);
    }

    #[test]
    fn impute_is_deterministic() {
        let t = toy_with_nulls();
        let a = impute_nulls(&t, 11).unwrap();
        let b = impute_nulls(&t, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.null_count(), 0);
    }

    #[test]
    fn imputed_reals_stay_in_observed_range() {
        let t = toy_with_nulls();
        for s in 0..10_000u64 {
            let v = impute_nulls(&t, s).unwrap().rows()[1][0].as_real().unwrap();
            assert!((0.0..=10.0).contains(&v));
        }
    }

    #[test]
    fn impute_all_null_column_fails() {
        let schema = vec![ColumnSchema::continuous("x")];
        let t = Table::new(schema, vec![vec![Field::Null], vec![Field::Null]]).unwrap();
        assert!(impute_nulls(&t, 0).is_err());
    }

    #[test]
    fn split_sizes_partition_and_determinism() {
        let schema = vec![ColumnSchema::continuous("x")];
        let rows = (0..10).map(|i| vec![Field::Real(i as f64)]).collect();
        let t = Table::new(schema, rows).unwrap();
        let (a, b) = split_train_holdout(&t, 0.7, 5).unwrap();
        assert_eq!((a.n_rows(), b.n_rows()), (7, 3));
        let mut all: Vec<f64> = a.rows().iter().chain(b.rows()).map(|r| r[0].as_real().unwrap()).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        let (a2, b2) = split_train_holdout(&t, 0.7, 5).unwrap();
        assert_eq!((a, b), (a2, b2));
        assert!(split_train_holdout(&t, 1.0, 5).is_err());
        assert!(split_train_holdout(&t, 0.0, 5).is_err());
    }
}
