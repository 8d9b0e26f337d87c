//! Train-on-synthetic, test-on-real harness: a 70/30 split of each table,
//! k-fold cross-validation on the 70% part, and testing every fold model on
//! the real 30%. The same protocol on the real table gives the reference.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::tree::{DecisionTree, TreeConfig};
use super::Stat;
use crate::error::{Error, Result};
use crate::schema::{split_train_holdout, ColumnKind, ColumnSchema, Field, Table};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficacyConfig {
    pub folds: usize,
    pub train_ratio: f64,
    pub tree: TreeConfig,
    /// Polynomial degree for regression, 2 to 5.
    pub degree: usize,
    pub seed: u64,
}

impl Default for EfficacyConfig {
    fn default() -> Self {
        EfficacyConfig {
            folds: 5,
            train_ratio: 0.7,
            tree: TreeConfig::default(),
            degree: 2,
            seed: 0,
        }
    }
}

impl EfficacyConfig {
    fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Eval("cross-validation needs at least 2 folds".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Eval("train ratio must lie in (0, 1)".into()));
        }
        if !(1..=5).contains(&self.degree) {
            return Err(Error::Eval("polynomial degree must lie in 1..=5".into()));
        }
        Ok(())
    }
}

/// Numeric features of every non-target column: continuous values as-is,
/// categoricals as indicators for every category but the first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    target: usize,
    /// Source column and, for indicators, the category it marks.
    features: Vec<(usize, Option<usize>)>,
}

impl FeatureMap {
    pub fn new(schema: &[ColumnSchema], target: usize) -> Self {
        let mut features = Vec::new();
        for (j, c) in schema.iter().enumerate() {
            if j == target {
                continue;
            }
            match c.kind {
                ColumnKind::Continuous => features.push((j, None)),
                _ => features.extend((1..c.categories.len()).map(|k| (j, Some(k)))),
            }
        }
        FeatureMap { target, features }
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }

    /// Source column of each feature, and whether it is an indicator.
    pub fn groups(&self) -> Vec<(usize, bool)> {
        self.features.iter().map(|(j, k)| (*j, k.is_some())).collect()
    }

    pub fn row(&self, row: &[Field]) -> Result<Vec<f64>> {
        self.features
            .iter()
            .map(|&(j, cat)| match (&row[j], cat) {
                (Field::Real(v), None) => Ok(*v),
                (Field::Category(i), Some(k)) => Ok(if *i == k { 1.0 } else { 0.0 }),
                _ => Err(Error::Eval("efficacy features need null-free rows".into())),
            })
            .collect()
    }

    pub fn matrix(&self, t: &Table) -> Result<Vec<Vec<f64>>> {
        t.rows().iter().map(|r| self.row(r)).collect()
    }

    pub fn labels(&self, t: &Table) -> Result<Vec<usize>> {
        t.column(self.target)
            .map(|f| f.as_category().ok_or_else(|| Error::Eval("target has a non-categorical value".into())))
            .collect()
    }

    pub fn targets(&self, t: &Table) -> Result<Vec<f64>> {
        t.column(self.target)
            .map(|f| f.as_real().ok_or_else(|| Error::Eval("target has a non-numeric value".into())))
            .collect()
    }
}

/// Macro-averaged F1 over the labels present in either list.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::Eval("F1 needs equally many non-empty labels and predictions".into()));
    }
    let labels: BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    let total: f64 = labels
        .iter()
        .map(|&c| {
            let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fn_ = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// 1 − SS_res/SS_tot about the mean of `truth`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub validation: Stat,
    pub test: Stat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    /// Trained on the synthetic table.
    pub synth: FoldScores,
    /// Trained on the real table.
    pub real: FoldScores,
}

fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn split_by_fold<T: Clone>(v: &[T], fold: &[usize], f: usize) -> (Vec<T>, Vec<T>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (x, &k) in v.iter().zip(fold) {
        if k == f {
            held.push(x.clone());
        } else {
            train.push(x.clone());
        }
    }
    (train, held)
}

fn target_index(t: &Table, target: &str) -> Result<usize> {
    t.column_index(target).ok_or_else(|| Error::Eval(format!("no column named '{target}'")))
}

fn same_schema(a: &Table, b: &Table) -> Result<()> {
    let ok = a.schema().len() == b.schema().len()
        && a.schema()
            .iter()
            .zip(b.schema())
            .all(|(x, y)| x.name == y.name && x.kind == y.kind && x.categories == y.categories);
    if ok {
        Ok(())
    } else {
        Err(Error::Eval("real and synthetic tables have different schemas".into()))
    }
}

pub fn ml_efficacy_classify(real: &Table, synth: &Table, target: &str, cfg: &EfficacyConfig) -> Result<ClassifyReport> {
    cfg.validate()?;
    same_schema(real, synth)?;
    let ti = target_index(real, target)?;
    let col = &real.schema()[ti];
    if col.kind == ColumnKind::Continuous {
        return Err(Error::Eval(format!("target '{target}' is continuous; use the regression task")));
    }
    let fm = FeatureMap::new(real.schema(), ti);
    let classes = fm.labels(real)?.into_iter().collect::<BTreeSet<_>>();
    if classes.len() < 2 {
        return Err(Error::Eval(format!("target '{target}' has a single class")));
    }
    let n_classes = col.categories.len();
    let (_, real_test) = split_train_holdout(real, cfg.train_ratio, seed::derive(cfg.seed, "efficacy-real-split"))?;
    let test_x = fm.matrix(&real_test)?;
    let test_y = fm.labels(&real_test)?;
    let run = |train_table: &Table, label: &str| -> Result<FoldScores> {
        let (part, _) = split_train_holdout(train_table, cfg.train_ratio, seed::derive(cfg.seed, label))?;
        let x = fm.matrix(&part)?;
        let y = fm.labels(&part)?;
        if x.len() < cfg.folds {
            return Err(Error::Eval(format!("{} training rows cannot fill {} folds", x.len(), cfg.folds)));
        }
        let fold = fold_assignment(x.len(), cfg.folds, seed::derive(cfg.seed, "efficacy-folds"));
        let (mut val, mut test) = (Vec::new(), Vec::new());
        for f in 0..cfg.folds {
            let (tx, vx) = split_by_fold(&x, &fold, f);
            let (ty, vy) = split_by_fold(&y, &fold, f);
            let tree = DecisionTree::fit(&tx, &ty, n_classes, &cfg.tree)?;
            let vp: Vec<usize> = vx.iter().map(|r| tree.predict(r)).collect();
            let tp: Vec<usize> = test_x.iter().map(|r| tree.predict(r)).collect();
            val.push(macro_f1(&vy, &vp)?);
            test.push(macro_f1(&test_y, &tp)?);
        }
        Ok(FoldScores {
            validation: Stat::of(&val),
            test: Stat::of(&test),
        })
    };
    Ok(ClassifyReport {
        synth: run(synth, "efficacy-synth-split")?,
        real: run(real, "efficacy-real-split")?,
    })
}

/// Exponent multisets of the polynomial expansion up to `degree`, excluding
/// repeated indicators (x² = x) and products of indicators from one column
/// (always zero). Each term lists feature indices in non-decreasing order.
pub fn polynomial_terms(groups: &[(usize, bool)], degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(groups: &[(usize, bool)], degree: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        if cur.len() == degree {
            return;
        }
        for f in start..groups.len() {
            let (col, ind) = groups[f];
            let clash = ind && cur.iter().any(|&g| groups[g].1 && groups[g].0 == col);
            if clash {
                continue;
            }
            cur.push(f);
            rec(groups, degree, f, cur, out);
            cur.pop();
        }
    }
    rec(groups, degree, 0, &mut cur, &mut out);
    out
}

/// Polynomial least squares with an intercept. Continuous inputs are
/// standardized on the training rows before expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    terms: Vec<Vec<usize>>,
    shift: Vec<f64>,
    scale: Vec<f64>,
    coef: Vec<f64>,
    /// Damping added because the design was rank-deficient.
    pub ridge: Option<f64>,
}

impl LeastSquares {
    pub fn fit(x: &[Vec<f64>], y: &[f64], groups: &[(usize, bool)], degree: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Eval("regression needs equally many non-empty rows and targets".into()));
        }
        let p = groups.len();
        let n = x.len() as f64;
        let mut shift = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for f in 0..p {
            if groups[f].1 {
                continue;
            }
            let m = x.iter().map(|r| r[f]).sum::<f64>() / n;
            let s = (x.iter().map(|r| (r[f] - m).powi(2)).sum::<f64>() / n).sqrt();
            shift[f] = m;
            scale[f] = if s > 0.0 { s } else { 1.0 };
        }
        let terms = polynomial_terms(groups, degree);
        let mut model = LeastSquares {
            terms,
            shift,
            scale,
            coef: Vec::new(),
            ridge: None,
        };
        let d = model.terms.len() + 1;
        let rows: Vec<Vec<f64>> = x.iter().map(|r| model.expand(r)).collect();
        let design = DMatrix::from_fn(x.len(), d, |i, j| rows[i][j]);
        let xtx = design.transpose() * &design;
        let xty = design.transpose() * DVector::from_column_slice(y);
        let eig = xtx.clone().symmetric_eigen().eigenvalues;
        let max = eig.iter().copied().fold(0.0, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let mut a = xtx;
        if !(min > 1e-12 * max) {
            let lambda = 1e-8 * max.max(1.0);
            for i in 0..d {
                a[(i, i)] += lambda;
            }
            model.ridge = Some(lambda);
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Eval("regression normal equations are not positive definite".into()))?;
        model.coef = chol.solve(&xty).iter().copied().collect();
        Ok(model)
    }

    fn expand(&self, row: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = row
            .iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let mut out = Vec::with_capacity(self.terms.len() + 1);
        out.push(1.0);
        out.extend(self.terms.iter().map(|t| t.iter().map(|&f| z[f]).product::<f64>()));
        out
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.expand(row).iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionScores {
    pub r2: FoldScores,
    pub mse: FoldScores,
    pub mae: FoldScores,
    /// Folds that needed the ridge fallback.
    pub ridge_folds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub synth: RegressionScores,
    pub real: RegressionScores,
}

pub fn ml_efficacy_regress(real: &Table, synth: &Table, target: &str, cfg: &EfficacyConfig) -> Result<RegressionReport> {
    cfg.validate()?;
    same_schema(real, synth)?;
    let ti = target_index(real, target)?;
    if real.schema()[ti].kind != ColumnKind::Continuous {
        return Err(Error::Eval(format!("target '{target}' is categorical; use the classification task")));
    }
    let fm = FeatureMap::new(real.schema(), ti);
    let groups = fm.groups();
    let (_, real_test) = split_train_holdout(real, cfg.train_ratio, seed::derive(cfg.seed, "efficacy-real-split"))?;
    let test_x = fm.matrix(&real_test)?;
    let test_y = fm.targets(&real_test)?;
    let errors = |truth: &[f64], pred: &[f64]| {
        let n = truth.len() as f64;
        let mse = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / n;
        let mae = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
        (r_squared(truth, pred), mse, mae)
    };
    let run = |train_table: &Table, label: &str| -> Result<RegressionScores> {
        let (part, _) = split_train_holdout(train_table, cfg.train_ratio, seed::derive(cfg.seed, label))?;
        let x = fm.matrix(&part)?;
        let y = fm.targets(&part)?;
        if x.len() < cfg.folds {
            return Err(Error::Eval(format!("{} training rows cannot fill {} folds", x.len(), cfg.folds)));
        }
        let fold = fold_assignment(x.len(), cfg.folds, seed::derive(cfg.seed, "efficacy-folds"));
        let mut v = [Vec::new(), Vec::new(), Vec::new()];
        let mut t = [Vec::new(), Vec::new(), Vec::new()];
        let mut ridge_folds = 0;
        for f in 0..cfg.folds {
            let (tx, vx) = split_by_fold(&x, &fold, f);
            let (ty, vy) = split_by_fold(&y, &fold, f);
            let model = LeastSquares::fit(&tx, &ty, &groups, cfg.degree)?;
            ridge_folds += usize::from(model.ridge.is_some());
            let vp: Vec<f64> = vx.iter().map(|r| model.predict(r)).collect();
            let tp: Vec<f64> = test_x.iter().map(|r| model.predict(r)).collect();
            let (a, b, c) = errors(&vy, &vp);
            v[0].push(a);
            v[1].push(b);
            v[2].push(c);
            let (a, b, c) = errors(&test_y, &tp);
            t[0].push(a);
            t[1].push(b);
            t[2].push(c);
        }
        let fs = |i: usize| FoldScores {
            validation: Stat::of(&v[i]),
            test: Stat::of(&t[i]),
        };
        Ok(RegressionScores {
            r2: fs(0),
            mse: fs(1),
            mae: fs(2),
            ridge_folds,
        })
    };
    Ok(RegressionReport {
        synth: run(synth, "efficacy-synth-split")?,
        real: run(real, "efficacy-real-split")?,
    })
}
