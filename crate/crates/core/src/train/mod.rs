//! Adversarial training with critic losses and the trace-interval
//! regularizer on generator weights.

mod checkpoint;
pub mod regularizer;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{sample, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use regularizer::{
    apply_regularizer, compute_vartheta, gershgorin_interval, median, Interval, LayerState, Outcome, Projection,
};

use crate::cond::{CondSampler, DEFAULT_DEPTH};
use crate::error::{Error, Result};
use crate::monitor::{MonitorConfig, SvdSnapshot};
use crate::nets::{Critics, Generator, Mode, GENERATOR_NAMESPACE};
use crate::schema::ColumnSchema;
use crate::seed;
use crate::tensor::{Adam, AdamConfig, HasParams, Noise, Tape, Tensor, Var};
use crate::transform::vgm::standard_normal;
use crate::transform::{ColumnLayout, Segment, SegmentKind};

/// mean(fake) − mean(real); the critic minimizes it.
pub fn critic_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Train("critic loss needs non-empty score lists".into()));
    }
    Ok(mean(fake_scores) - mean(real_scores))
}

/// −mean(fake).
pub fn generator_loss(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::Train("generator loss needs a non-empty score list".into()));
    }
    Ok(-mean(fake_scores))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Critic updates per generator update.
    pub d_steps: usize,
    pub regularizer_enabled: bool,
    /// Iterations between spectrum snapshots.
    pub monitor_every: usize,
    pub monitor: MonitorConfig,
    /// Weight of a finite-difference gradient penalty on the critic; off when None.
    pub gradient_penalty: Option<f64>,
    /// Permute column blocks once per pass over the data, identically for real and fake rows.
    pub column_shuffle: bool,
    /// Fail the run if a layer ends a step outside its interval.
    pub check_interval: bool,
    pub cond_depth: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 64,
            adam: AdamConfig::default(),
            d_steps: 1,
            regularizer_enabled: true,
            monitor_every: 10,
            monitor: MonitorConfig::default(),
            gradient_penalty: None,
            column_shuffle: false,
            check_interval: false,
            cond_depth: DEFAULT_DEPTH,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.d_steps == 0 {
            return bad("at least one critic step per iteration is required");
        }
        if self.monitor_every == 0 {
            return bad("monitor interval must be at least 1");
        }
        if let Some(w) = self.gradient_penalty {
            if !(w >= 0.0 && w.is_finite()) {
                return bad("gradient penalty weight must be finite and non-negative");
            }
        }
        self.monitor.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub critic: f64,
    pub generator: f64,
}

/// One regularizer call on one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRecord {
    pub iteration: usize,
    pub layer: String,
    pub outcome: Outcome,
    /// Spectrum stored for the next call; ϑ is bounded by 1 + its median.
    pub lambda: Vec<f64>,
}

/// One line of the monitor CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorRow {
    pub iteration: usize,
    pub layer: String,
    pub rho: f64,
    pub trace: f64,
    pub vartheta: f64,
    pub projected: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub snapshots: Vec<SvdSnapshot>,
    pub projections: Vec<ProjectionRecord>,
    pub monitor: Vec<MonitorRow>,
    /// Layers whose zero trace surrogate prevented a projection.
    pub warnings: Vec<String>,
}

/// Writes `iteration,layer,rho,trace,vartheta,projected`.
pub fn write_monitor_csv(rows: &[MonitorRow], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,layer,rho,trace,vartheta,projected\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{}",
            r.iteration, r.layer, r.rho, r.trace, r.vartheta, r.projected
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fake rows are mapped into the ±1 convention real category one-hots use.
fn critic_view(tape: &mut Tape, row: Var, segments: &[Segment]) -> Result<Var> {
    if segments.iter().all(|s| s.kind != SegmentKind::CategoryOneHot) {
        return Ok(row);
    }
    let parts: Vec<Var> = segments
        .iter()
        .map(|s| {
            let x = tape.slice(row, 1, s.offset, s.width)?;
            Ok(match s.kind {
                SegmentKind::CategoryOneHot => {
                    let x = tape.scale(x, 2.0);
                    tape.add_scalar(x, -1.0)
                }
                _ => x,
            })
        })
        .collect::<Result<_>>()?;
    tape.concat(&parts, 1)
}

pub struct Trainer {
    pub generator: Generator,
    pub critics: Critics,
    cfg: TrainConfig,
    data: Vec<f64>,
    n_rows: usize,
    width: usize,
    columns: Vec<ColumnLayout>,
    cond_width: usize,
    opt_g: Adam,
    opt_d: Adam,
    regularizer: BTreeMap<String, LayerState>,
    batch_rng: seed::Rng,
    z_rng: seed::Rng,
    shuffle_rng: seed::Rng,
    cond: CondSampler,
    noise: Noise,
    column_order: Vec<usize>,
    iteration: usize,
    report: TrainReport,
}

impl Trainer {
    /// `rows` are encoded under `columns`; the generator and critics must
    /// have been built for the same row and conditional widths.
    pub fn new(
        rows: &[Vec<f64>],
        columns: &[ColumnLayout],
        schema: &[ColumnSchema],
        generator: Generator,
        critics: Critics,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if rows.is_empty() {
            return Err(Error::Train("training table is empty".into()));
        }
        let width = generator.out_width;
        if let Some(r) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::Train(format!("encoded row width {} does not match generator width {width}", r.len())));
        }
        let covered: usize = columns.iter().map(|c| c.width).sum();
        if covered != width {
            return Err(Error::Train(format!("column layout covers {covered} of {width} encoded positions")));
        }
        let cond = CondSampler::for_schema(schema, cfg.cond_depth, seed::derive(cfg.seed, "train-cond"))?;
        if cond.width() != generator.cond_width {
            return Err(Error::Train(format!(
                "conditional width {} does not match generator input {}",
                cond.width(),
                generator.cond_width
            )));
        }
        Ok(Trainer {
            cond_width: cond.width(),
            generator,
            critics,
            data: rows.concat(),
            n_rows: rows.len(),
            width,
            columns: columns.to_vec(),
            opt_g: Adam::new(cfg.adam)?,
            opt_d: Adam::new(cfg.adam)?,
            regularizer: BTreeMap::new(),
            batch_rng: seed::rng(seed::derive(cfg.seed, "train-batches")),
            z_rng: seed::rng(seed::derive(cfg.seed, "train-noise-z")),
            shuffle_rng: seed::rng(seed::derive(cfg.seed, "train-shuffle")),
            cond,
            noise: Noise::seeded(seed::derive(cfg.seed, "train-noise")),
            column_order: (0..columns.len()).collect(),
            iteration: 0,
            report: TrainReport::default(),
            cfg,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn regularizer_state(&self) -> &BTreeMap<String, LayerState> {
        &self.regularizer
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> (Generator, Critics, TrainReport) {
        (self.generator, self.critics, self.report)
    }

    /// One iteration: critic step(s), generator step, regularizer, snapshot.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration;
        let epoch_len = self.n_rows.div_ceil(self.cfg.batch_size);
        if self.cfg.column_shuffle && it.is_multiple_of(epoch_len) {
            self.column_order.shuffle(&mut self.shuffle_rng);
        }
        let mut critic = 0.0;
        for _ in 0..self.cfg.d_steps {
            critic = self.critic_step()?;
            if !critic.is_finite() {
                return Err(Error::NonFiniteLoss { which: "critic", iteration: it });
            }
        }
        let generator = self.generator_step()?;
        if !generator.is_finite() {
            return Err(Error::NonFiniteLoss { which: "generator", iteration: it });
        }
        let projected = if self.cfg.regularizer_enabled {
            self.regularize(it)?
        } else {
            BTreeMap::new()
        };
        if it.is_multiple_of(self.cfg.monitor_every) {
            self.snapshot(it, &projected)?;
        }
        let rec = LossRecord { iteration: it, critic, generator };
        self.report.losses.push(rec);
        self.iteration += 1;
        Ok(rec)
    }

    fn real_batch(&mut self, b: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(b * self.width);
        for _ in 0..b {
            let i = self.batch_rng.random_range(0..self.n_rows);
            out.extend_from_slice(&self.data[i * self.width..(i + 1) * self.width]);
        }
        out
    }

    fn z_batch(&mut self, b: usize) -> Tensor {
        let d_z = self.generator.config.d_z;
        let data = (0..b * d_z).map(|_| standard_normal(&mut self.z_rng)).collect();
        Tensor::new(vec![b, d_z], data).expect("shape matches data")
    }

    fn cond_batch(&mut self, b: usize) -> Tensor {
        let mut data = vec![0.0; b * self.cond_width];
        for row in data.chunks_mut(self.cond_width.max(1)) {
            self.cond.fill(row);
        }
        Tensor::new(vec![b, self.cond_width], data).expect("shape matches data")
    }

    fn shuffled(&self) -> bool {
        self.column_order.iter().enumerate().any(|(i, &j)| i != j)
    }

    /// Reorders the column blocks of flat rows.
    fn arrange_rows(&self, rows: Vec<f64>) -> Vec<f64> {
        if !self.shuffled() {
            return rows;
        }
        let mut out = Vec::with_capacity(rows.len());
        for r in rows.chunks(self.width) {
            for &j in &self.column_order {
                let c = self.columns[j];
                out.extend_from_slice(&r[c.offset..c.offset + c.width]);
            }
        }
        out
    }

    fn arrange_var(&self, tape: &mut Tape, row: Var) -> Result<Var> {
        if !self.shuffled() {
            return Ok(row);
        }
        let parts: Vec<Var> = self
            .column_order
            .iter()
            .map(|&j| tape.slice(row, 1, self.columns[j].offset, self.columns[j].width))
            .collect::<Result<_>>()?;
        tape.concat(&parts, 1)
    }

    fn doubled(cond: &Tensor) -> Tensor {
        let (b, k) = (cond.shape()[0], cond.shape()[1]);
        let mut data = cond.data().to_vec();
        data.extend_from_slice(cond.data());
        Tensor::new(vec![2 * b, k], data).expect("shape matches data")
    }

    fn critic_step(&mut self) -> Result<f64> {
        let b = self.cfg.batch_size;
        let cond = self.cond_batch(b);
        let z = self.z_batch(b);
        let fake = {
            let mut tape = Tape::new();
            tape.freeze(GENERATOR_NAMESPACE);
            let out = self.generator.forward(&mut tape, &z, &cond, &mut self.noise, Mode::Train)?;
            let view = critic_view(&mut tape, out.row, &self.generator.segments)?;
            tape.value(view).data().to_vec()
        };
        let real = self.real_batch(b);
        let mut both = self.arrange_rows(real.clone());
        both.extend(self.arrange_rows(fake.clone()));

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2 * b, self.width], both)?);
        let c2 = tape.constant(Self::doubled(&cond));
        let s = self.critics.forward(&mut tape, x, c2, Mode::Train)?;
        let sr = tape.slice(s, 0, 0, b)?;
        let sf = tape.slice(s, 0, b, b)?;
        let mr = tape.mean(sr)?;
        let mf = tape.mean(sf)?;
        let mut loss = tape.sub(mf, mr)?;
        if let Some(weight) = self.cfg.gradient_penalty {
            let gp = self.gradient_penalty(&mut tape, &real, &fake, &cond)?;
            let gp = tape.scale(gp, weight);
            loss = tape.add(loss, gp)?;
        }
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        self.opt_d.step(self.critics.params_mut(), |id| grads.param(id))?;
        Ok(value)
    }

    /// Penalizes (‖∇ₓD(x̂)‖ − 1)² at interpolates x̂. The norm is measured as
    /// the central difference of D along the current unit gradient
    /// direction, which keeps the penalty differentiable with first-order
    /// reverse mode only.
    fn gradient_penalty(&mut self, tape: &mut Tape, real: &[f64], fake: &[f64], cond: &Tensor) -> Result<Var> {
        const H: f64 = 1e-3;
        let b = self.cfg.batch_size;
        let w = self.width;
        let mut hat = Vec::with_capacity(b * w);
        for i in 0..b {
            let u: f64 = self.batch_rng.random();
            for j in 0..w {
                hat.push(u * real[i * w + j] + (1.0 - u) * fake[i * w + j]);
            }
        }
        let hat = self.arrange_rows(hat);

        // Direction: the input gradient of a probe copy, so running
        // statistics of the live critics are not touched twice.
        let dir = {
            let mut probe = self.critics.clone();
            let mut t = Tape::new();
            for ns in probe.namespaces() {
                t.freeze(ns);
            }
            let x = t.leaf(Tensor::new(vec![b, w], hat.clone())?);
            let c = t.constant(cond.clone());
            let s = probe.forward(&mut t, x, c, Mode::Train)?;
            let total = t.sum(s);
            let g = t.backward(total)?;
            let mut d = g.wrt(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; b * w]);
            for r in d.chunks_mut(w) {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    r.iter_mut().for_each(|v| *v /= n);
                }
            }
            d
        };
        let shifted = |sign: f64| -> Result<Tensor> {
            Tensor::new(vec![b, w], hat.iter().zip(&dir).map(|(x, d)| x + sign * H * d).collect())
        };
        let c = tape.constant(cond.clone());
        let xp = tape.constant(shifted(1.0)?);
        let xm = tape.constant(shifted(-1.0)?);
        let sp = self.critics.forward(tape, xp, c, Mode::Train)?;
        let sm = self.critics.forward(tape, xm, c, Mode::Train)?;
        let diff = tape.sub(sp, sm)?;
        let slope = tape.scale(diff, 1.0 / (2.0 * H));
        let dev = tape.add_scalar(slope, -1.0);
        let sq = tape.mul(dev, dev)?;
        tape.mean(sq)
    }

    fn generator_step(&mut self) -> Result<f64> {
        let b = self.cfg.batch_size;
        let cond = self.cond_batch(b);
        let z = self.z_batch(b);
        let real = self.real_batch(b);
        let real = self.arrange_rows(real);

        let mut tape = Tape::new();
        for ns in self.critics.namespaces() {
            tape.freeze(ns);
        }
        let out = self.generator.forward(&mut tape, &z, &cond, &mut self.noise, Mode::Train)?;
        let view = critic_view(&mut tape, out.row, &self.generator.segments)?;
        let fake = self.arrange_var(&mut tape, view)?;
        let r = tape.constant(Tensor::new(vec![b, self.width], real)?);
        let x = tape.concat(&[r, fake], 0)?;
        let c2 = tape.constant(Self::doubled(&cond));
        let s = self.critics.forward(&mut tape, x, c2, Mode::Train)?;
        let sf = tape.slice(s, 0, b, b)?;
        let m = tape.mean(sf)?;
        let loss = tape.scale(m, -1.0);
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        self.opt_g.step(self.generator.params_mut(), |id| grads.param(id))?;
        Ok(value)
    }

    /// Returns which layers were rescaled this iteration.
    fn regularize(&mut self, it: usize) -> Result<BTreeMap<String, bool>> {
        let mut projected = BTreeMap::new();
        for p in self.generator.weight_params_mut() {
            let (rows, cols) = p.value.as_matrix()?;
            let state = self.regularizer.entry(p.name.clone()).or_default();
            let o = apply_regularizer(rows, cols, p.value.data_mut(), state)?;
            if o.projection == Projection::SkippedZero {
                self.report
                    .warnings
                    .push(format!("iteration {it}: layer {} has a zero trace surrogate; projection skipped", p.name));
            }
            if self.cfg.check_interval {
                let tol = 1e-9 * o.lo.abs().max(o.hi.abs()).max(1.0);
                let inside = o.trace_after >= o.lo - tol && o.trace_after <= o.hi + tol;
                let bound = 1.0 + median(&state.lambda)?;
                if !inside && o.projection != Projection::SkippedZero {
                    return Err(Error::Train(format!(
                        "iteration {it}: layer {} trace {} left [{}, {}]",
                        p.name, o.trace_after, o.lo, o.hi
                    )));
                }
                if state.vartheta.abs() > bound + 1e-12 * bound {
                    return Err(Error::Train(format!("iteration {it}: layer {} ϑ exceeds its bound", p.name)));
                }
            }
            projected.insert(p.name.clone(), o.projected());
            self.report.projections.push(ProjectionRecord {
                iteration: it,
                layer: p.name.clone(),
                outcome: o,
                lambda: state.lambda.clone(),
            });
        }
        Ok(projected)
    }

    fn snapshot(&mut self, it: usize, projected: &BTreeMap<String, bool>) -> Result<()> {
        for p in self.generator.weight_params() {
            let (rows, cols) = p.value.as_matrix()?;
            let snap = SvdSnapshot::new(it, p.name.clone(), rows, cols, p.value.data(), &self.cfg.monitor)?;
            let vartheta = match self.regularizer.get(&p.name) {
                Some(st) if self.cfg.regularizer_enabled => st.vartheta,
                _ => compute_vartheta(&snap.singular_values)?,
            };
            self.report.monitor.push(MonitorRow {
                iteration: it,
                layer: p.name.clone(),
                rho: snap.metric,
                trace: snap.singular_values.iter().sum(),
                vartheta,
                projected: projected.get(&p.name).copied().unwrap_or(false),
            });
            self.report.snapshots.push(snap);
        }
        Ok(())
    }
}
