//! Command-line front end: `fit`, `sample`, `evaluate` and `monitor-report`.
//!
//! Every command resolves a [`RunConfig`] (defaults, then an optional
//! `--config` file, then flags), derives module seeds from the master seed
//! and persists the resolved config next to its artifacts. Reports carry
//! content fingerprints rather than paths, so a rerun into another
//! directory produces byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cond::CondSampler;
use crate::error::{Error, Result};
use crate::evalmetrics::{
    marginal_distance, ml_efficacy_classify, ml_efficacy_regress, reliability, ClassifyReport, DistanceSpace,
    EfficacyConfig, Marginal, MarginalKind, NndrDirection, RegressionReport, ReliabilityConfig, ReliabilityReport,
};
use crate::monitor::{onset_report, read_series, MonitorConfig};
use crate::nets::{Critics, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::schema::{
    impute_nulls, infer_schema, parse_rows, read_raw_csv, ColumnKind, ColumnSchema, SchemaOverrides, Table,
    DEFAULT_CARDINALITY_THRESHOLD,
};
use crate::seed;
use crate::train::{write_monitor_csv, Checkpoint, LossRecord, MonitorRow, TrainConfig, Trainer};
use crate::transform::{TableEncoder, TransformConfig};

pub const RUN_CONFIG_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MONITOR_FILE: &str = "monitor.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classify,
    Regress,
    Skip,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Column predicted by the efficacy harness.
    pub target: Option<String>,
    /// Chosen from the target's kind when absent.
    pub task: Option<Task>,
}

/// Every effective setting of a run. Module seeds are derived from `seed`
/// and echoed here so the file alone reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub cardinality_threshold: usize,
    pub schema: SchemaOverrides,
    pub transform: TransformConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub reliability: ReliabilityConfig,
    pub efficacy: EfficacyConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            format_version: RUN_CONFIG_FORMAT_VERSION,
            seed: 0,
            cardinality_threshold: DEFAULT_CARDINALITY_THRESHOLD,
            schema: SchemaOverrides::default(),
            transform: TransformConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            reliability: ReliabilityConfig::default(),
            efficacy: EfficacyConfig::default(),
            evaluation: EvaluationConfig::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match v.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(n) if n == RUN_CONFIG_FORMAT_VERSION as u64 => {}
            Some(n) => {
                return Err(Error::Config(format!(
                    "{}: config format version {n} is not supported (expected {RUN_CONFIG_FORMAT_VERSION})",
                    path.display()
                )))
            }
            None => return Err(Error::Config(format!("{}: missing format_version", path.display()))),
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Sets the train, reliability and efficacy seeds from the master seed.
    pub fn derive_seeds(&mut self) {
        self.train.seed = seed::derive(self.seed, "train");
        self.reliability.seed = seed::derive(self.seed, "reliability");
        self.efficacy.seed = seed::derive(self.seed, "efficacy");
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.reliability.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::Config("reliability scales must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "tabsynth", version, about = "Mixed-type tabular data synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit encoders, train the networks and write model artifacts.
    Fit(FitArgs),
    /// Draw synthetic rows from a fitted model.
    Sample(SampleArgs),
    /// Compare a synthetic table with the real one.
    Evaluate(EvaluateArgs),
    /// Detect stability onsets in a monitor series CSV.
    MonitorReport(MonitorArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Resolved config from an earlier run; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Schema override document (JSON).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Distinct-value count at or below which numeric columns are categorical.
    #[arg(long)]
    pub cardinality_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; written atomically.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub common: CommonArgs,

    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub regularizer: Option<Switch>,
    /// Gradient-penalty weight; no penalty unless set.
    #[arg(long)]
    pub gradient_penalty: Option<f64>,
    #[arg(long, value_enum)]
    pub column_shuffle: Option<Switch>,
    #[arg(long)]
    pub monitor_every: Option<usize>,
    #[arg(long)]
    pub c_s: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub spike_factor: Option<f64>,

    /// Mixture mode budget per continuous column.
    #[arg(long)]
    pub m_c: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub clip_width: Option<f64>,

    #[arg(long)]
    pub d_z: Option<usize>,
    #[arg(long)]
    pub bin_len: Option<usize>,
    /// Channels leaving the generator's linear block (even).
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub gumbel_tau: Option<f64>,
    #[arg(long)]
    pub sigma_init: Option<f64>,
    #[arg(long)]
    pub bn_momentum: Option<f64>,
    #[arg(long)]
    pub bn_eps: Option<f64>,
    #[arg(long, value_enum)]
    pub ablate_middle_residual: Option<Switch>,
    /// Critic convolution widths, three comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub critic_filters: Option<Vec<usize>>,
    /// Width of the critic head's hidden layer.
    #[arg(long)]
    pub critic_head_hidden: Option<usize>,
    #[arg(long)]
    pub critics: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Model directory written by `fit`, or a checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub synth: PathBuf,
    /// Output directory for the report; written atomically.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Comma-separated subsample fractions.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// `encoded` or `raw-mixed`.
    #[arg(long, value_parser = parse_kebab::<DistanceSpace>)]
    pub space: Option<DistanceSpace>,
    /// `synth-to-real` or `real-to-synth`.
    #[arg(long, value_parser = parse_kebab::<NndrDirection>)]
    pub direction: Option<NndrDirection>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// CSV with `iteration`, `layer` and `rho` columns.
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long, default_value_t = MonitorConfig::default().window)]
    pub window: usize,
    /// Spike threshold in window standard deviations.
    #[arg(long, default_value_t = MonitorConfig::default().spike_factor)]
    pub k: f64,
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.schema {
        cfg.schema = SchemaOverrides::load(p)?;
    }
    if let Some(t) = common.cardinality_threshold {
        cfg.cardinality_threshold = t;
    }
    cfg.derive_seeds();
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl FitArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = base_config(&self.common)?;
        let t = &mut cfg.train;
        set(&mut t.iterations, self.iterations);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.adam.lr, self.lr);
        set(&mut t.d_steps, self.d_steps);
        set(&mut t.regularizer_enabled, self.regularizer.map(Switch::on));
        if self.gradient_penalty.is_some() {
            t.gradient_penalty = self.gradient_penalty;
        }
        set(&mut t.column_shuffle, self.column_shuffle.map(Switch::on));
        set(&mut t.monitor_every, self.monitor_every);
        set(&mut t.monitor.c_s, self.c_s);
        set(&mut t.monitor.window, self.window);
        set(&mut t.monitor.spike_factor, self.spike_factor);

        let x = &mut cfg.transform;
        set(&mut x.m_c, self.m_c);
        set(&mut x.epsilon, self.epsilon);
        set(&mut x.clip_width, self.clip_width);

        let g = &mut cfg.generator;
        set(&mut g.d_z, self.d_z);
        set(&mut g.bin_len, self.bin_len);
        set(&mut g.channels, self.channels);
        set(&mut g.hidden, self.hidden);
        set(&mut g.filters, self.filters);
        set(&mut g.gumbel_tau, self.gumbel_tau);
        set(&mut g.sigma_init, self.sigma_init);
        set(&mut g.bn_momentum, self.bn_momentum);
        set(&mut g.bn_eps, self.bn_eps);
        set(&mut g.ablate_middle_residual, self.ablate_middle_residual.map(Switch::on));

        let d = &mut cfg.discriminator;
        if let Some(f) = &self.critic_filters {
            d.filters = [f[0], f[1], f[2]];
        }
        set(&mut d.head_hidden, self.critic_head_hidden);
        set(&mut d.count, self.critics);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl EvaluateArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = base_config(&self.common)?;
        let r = &mut cfg.reliability;
        set(&mut r.scales, self.scales.clone());
        set(&mut r.repeats, self.repeats);
        set(&mut r.distance.space, self.space);
        set(&mut r.distance.direction, self.direction);
        let e = &mut cfg.efficacy;
        set(&mut e.folds, self.folds);
        set(&mut e.tree.max_depth, self.max_depth);
        set(&mut e.degree, self.degree);
        if self.target.is_some() {
            cfg.evaluation.target = self.target.clone();
        }
        if self.task.is_some() {
            cfg.evaluation.task = self.task;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads a CSV, inferring its schema under the config's overrides, or
/// parsing it against `schema` when given.
fn load_table(path: &Path, cfg: &RunConfig, schema: Option<&[ColumnSchema]>) -> Result<(Table, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, raw) = read_raw_csv(path)?;
    let schema = match schema {
        Some(s) => {
            let names: Vec<&str> = s.iter().map(|c| c.name.as_str()).collect();
            if names != header.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::Schema(format!(
                    "{}: header {header:?} does not match columns {names:?}",
                    path.display()
                )));
            }
            s.to_vec()
        }
        None => infer_schema(&header, &raw, &cfg.schema, cfg.cardinality_threshold)?,
    };
    Ok((parse_rows(&schema, &raw)?, bytes))
}

fn run_id(parts: &[&[u8]]) -> String {
    let mut h = 0u64;
    for p in parts {
        h = seed::splitmix64(h ^ seed::fingerprint(p));
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub rows: usize,
    pub columns: usize,
    pub fingerprint: String,
}

impl InputSummary {
    fn of(t: &Table, bytes: &[u8]) -> Self {
        InputSummary {
            rows: t.n_rows(),
            columns: t.n_cols(),
            fingerprint: format!("{:016x}", seed::fingerprint(bytes)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOnset {
    pub layer: String,
    /// Iteration of the first spike; `None` means stable.
    pub onset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetSummary {
    pub window: usize,
    pub k: f64,
    pub layers: Vec<LayerOnset>,
    /// Set when the series was too short to analyse.
    pub note: Option<String>,
}

fn onset_summary(rows: &[MonitorRow], cfg: &MonitorConfig) -> OnsetSummary {
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        series.entry(r.layer.clone()).or_default().push((r.iteration, r.rho));
    }
    let (layers, note) = match onset_report(&series, cfg.window, cfg.spike_factor) {
        Ok(v) => (v.into_iter().map(|(layer, onset)| LayerOnset { layer, onset }).collect(), None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    OnsetSummary {
        window: cfg.window,
        k: cfg.spike_factor,
        layers,
        note,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub format_version: u32,
    pub run_id: String,
    pub command: String,
    pub config: RunConfig,
    pub input: InputSummary,
    pub schema: Vec<ColumnSchema>,
    pub imputed_cells: usize,
    pub encoded_width: usize,
    pub iterations: usize,
    pub final_loss: Option<LossRecord>,
    pub projections: usize,
    pub monitor: OnsetSummary,
    pub warnings: Vec<String>,
    pub artifacts: Vec<String>,
}

/// Writes `files` into a sibling staging directory, then renames it onto
/// `out`, so a failed run leaves nothing behind.
fn commit_dir(out: &Path, force: bool, files: &[(&str, Vec<u8>)]) -> Result<()> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("{}: not a directory name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stage = parent.join(format!(".{name}.partial"));
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    }
    fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    let written = (|| {
        for (file, bytes) in files {
            let p = stage.join(file);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        if out.exists() {
            if !force {
                return Err(Error::Config(format!("{} already exists; pass --force to replace it", out.display())));
            }
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
        fs::rename(&stage, out).map_err(|e| Error::io(out, e))
    })();
    if written.is_err() {
        let _ = fs::remove_dir_all(&stage);
    }
    written
}

fn refuse_existing(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::Config(format!("{} already exists; pass --force to replace it", out.display())));
    }
    Ok(())
}

fn losses_csv(losses: &[LossRecord]) -> String {
    let mut s = String::from("iteration,critic,generator\n");
    for l in losses {
        writeln!(s, "{},{:e},{:e}", l.iteration, l.critic, l.generator).unwrap();
    }
    s
}

fn temp_file_bytes(write: impl FnOnce(&Path) -> Result<()>, dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(format!(".{name}.tmp"));
    write(&p)?;
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
    Ok(bytes)
}

pub fn cmd_fit(args: &FitArgs) -> Result<FitReport> {
    let cfg = args.resolve()?;
    refuse_existing(&args.out, args.force)?;
    let (raw_table, bytes) = load_table(&args.input, &cfg, None)?;
    let imputed_cells = raw_table.null_count();
    let table = if imputed_cells > 0 {
        impute_nulls(&raw_table, seed::derive(cfg.seed, "impute"))?
    } else {
        raw_table
    };
    let encoder = TableEncoder::fit(&table, &cfg.transform, seed::derive(cfg.seed, "transform"))?;
    let rows = encoder.encode_table(&table)?.rows;
    let cond_width = CondSampler::for_schema(table.schema(), cfg.train.cond_depth, 0)?.width();
    let generator = Generator::new(cfg.generator, &encoder.layout, cond_width, seed::derive(cfg.seed, "generator"))?;
    let critics = Critics::new(cfg.discriminator, encoder.width(), cond_width, seed::derive(cfg.seed, "critics"))?;
    let mut trainer = Trainer::new(&rows, &encoder.layout.columns, table.schema(), generator, critics, cfg.train)?;
    trainer.run()?;
    let (generator, critics, train) = trainer.finish();

    let config_json = cfg.to_json()?;
    let ckpt = Checkpoint::new(encoder.clone(), generator, critics, cfg.train.cond_depth, cfg.train.iterations);
    let parent = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let monitor_csv = temp_file_bytes(|p| write_monitor_csv(&train.monitor, p), parent, MONITOR_FILE)?;
    let artifacts: Vec<String> = [CONFIG_FILE, ENCODER_FILE, CHECKPOINT_FILE, MONITOR_FILE, LOSSES_FILE, REPORT_FILE]
        .map(String::from)
        .to_vec();
    let report = FitReport {
        format_version: REPORT_FORMAT_VERSION,
        run_id: run_id(&[config_json.as_bytes(), &bytes]),
        command: "fit".into(),
        input: InputSummary::of(&table, &bytes),
        schema: table.schema().to_vec(),
        imputed_cells,
        encoded_width: encoder.width(),
        iterations: cfg.train.iterations,
        final_loss: train.losses.last().copied(),
        projections: train.projections.iter().filter(|p| p.outcome.projected()).count(),
        monitor: onset_summary(&train.monitor, &cfg.train.monitor),
        warnings: train.warnings.clone(),
        artifacts,
        config: cfg,
    };
    let files = vec![
        (CONFIG_FILE, config_json.into_bytes()),
        (ENCODER_FILE, (serde_json::to_string(&encoder)? + "\n").into_bytes()),
        (CHECKPOINT_FILE, (serde_json::to_string(&ckpt)? + "\n").into_bytes()),
        (MONITOR_FILE, monitor_csv),
        (LOSSES_FILE, losses_csv(&train.losses).into_bytes()),
        (REPORT_FILE, (serde_json::to_string_pretty(&report)? + "\n").into_bytes()),
    ];
    commit_dir(&args.out, args.force, &files)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub format_version: u32,
    pub command: String,
    pub checkpoint_fingerprint: String,
    pub n: usize,
    pub seed: u64,
}

fn checkpoint_path(model: &Path) -> PathBuf {
    if model.is_dir() {
        model.join(CHECKPOINT_FILE)
    } else {
        model.to_path_buf()
    }
}

/// Writes the CSV and a `<out>.json` record of the request next to it.
pub fn cmd_sample(args: &SampleArgs) -> Result<SampleRecord> {
    let path = checkpoint_path(&args.model);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut ckpt = Checkpoint::load(&path)?;
    let table = ckpt.sample(args.n, args.seed)?;
    let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = args.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let staged = dir.join(format!(".{name}.partial"));
    table.write_csv(&staged)?;
    fs::rename(&staged, &args.out).map_err(|e| Error::io(&args.out, e))?;
    let record = SampleRecord {
        format_version: REPORT_FORMAT_VERSION,
        command: "sample".into(),
        checkpoint_fingerprint: format!("{:016x}", seed::fingerprint(&bytes)),
        n: args.n,
        seed: args.seed,
    };
    let side = dir.join(format!("{name}.json"));
    fs::write(&side, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum Efficacy {
    Classify { target: String, report: ClassifyReport },
    Regress { target: String, report: RegressionReport },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub run_id: String,
    pub command: String,
    pub config: RunConfig,
    pub real: InputSummary,
    pub synth: InputSummary,
    pub reliability: Vec<ReliabilityReport>,
    pub marginals: Vec<Marginal>,
    pub efficacy: Option<Efficacy>,
    pub artifacts: Vec<String>,
}

impl EvalReport {
    /// Flat `section,scale,metric,mean,std` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,scale,metric,mean,std\n");
        for r in &self.reliability {
            for (m, st) in [("nndr", r.nndr), ("ims", r.ims), ("dcr", r.dcr)] {
                writeln!(s, "reliability,{},{m},{:e},{:e}", r.scale, st.mean, st.std).unwrap();
            }
            writeln!(s, "reliability,{},dcr_degenerate,{},0", r.scale, r.dcr_degenerate).unwrap();
        }
        for m in &self.marginals {
            let kind = match m.kind {
                MarginalKind::KolmogorovSmirnov => "ks",
                MarginalKind::TotalVariation => "tv",
            };
            writeln!(s, "marginal,,{}:{kind},{:e},0", csv_field(&m.column), m.value).unwrap();
        }
        match &self.efficacy {
            Some(Efficacy::Classify { report, .. }) => {
                for (who, f) in [("synth", report.synth), ("real", report.real)] {
                    writeln!(s, "efficacy,,{who}:f1_validation,{:e},{:e}", f.validation.mean, f.validation.std).unwrap();
                    writeln!(s, "efficacy,,{who}:f1_test,{:e},{:e}", f.test.mean, f.test.std).unwrap();
                }
            }
            Some(Efficacy::Regress { report, .. }) => {
                for (who, r) in [("synth", report.synth), ("real", report.real)] {
                    for (m, f) in [("r2", r.r2), ("mse", r.mse), ("mae", r.mae)] {
                        writeln!(s, "efficacy,,{who}:{m}_validation,{:e},{:e}", f.validation.mean, f.validation.std).unwrap();
                        writeln!(s, "efficacy,,{who}:{m}_test,{:e},{:e}", f.test.mean, f.test.std).unwrap();
                    }
                }
            }
            None => {}
        }
        s
    }

    /// Human-readable summary, one metric per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("run {}\n", self.run_id);
        for r in &self.reliability {
            writeln!(s, "scale {} ({} repeats)", r.scale, r.repeats).unwrap();
            for (m, st) in [("NNDR", r.nndr), ("IMS", r.ims), ("DCR", r.dcr)] {
                writeln!(s, "  {m:<5} {:.4} ± {:.4}", st.mean, st.std).unwrap();
            }
            if r.dcr_degenerate > 0 {
                writeln!(s, "  DCR degenerate in {} repeats", r.dcr_degenerate).unwrap();
            }
        }
        writeln!(s, "marginals").unwrap();
        for m in &self.marginals {
            let kind = match m.kind {
                MarginalKind::KolmogorovSmirnov => "KS",
                MarginalKind::TotalVariation => "TV",
            };
            writeln!(s, "  {} {kind} {:.4}", m.column, m.value).unwrap();
        }
        match &self.efficacy {
            Some(Efficacy::Classify { target, report }) => {
                writeln!(s, "classification of '{target}' (macro F1 on real test split)").unwrap();
                for (who, f) in [("synthetic", report.synth), ("real", report.real)] {
                    writeln!(s, "  trained on {who:<9} {:.4} ± {:.4}", f.test.mean, f.test.std).unwrap();
                }
            }
            Some(Efficacy::Regress { target, report }) => {
                writeln!(s, "regression of '{target}' (R² on real test split)").unwrap();
                for (who, r) in [("synthetic", report.synth), ("real", report.real)] {
                    writeln!(s, "  trained on {who:<9} {:.4} ± {:.4}", r.r2.test.mean, r.r2.test.std).unwrap();
                }
            }
            None => {}
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    let mut cfg = args.resolve()?;
    refuse_existing(&args.out, args.force)?;
    let (real, real_bytes) = load_table(&args.real, &cfg, None)?;
    let (synth, synth_bytes) = load_table(&args.synth, &cfg, Some(real.schema()))?;
    if synth.null_count() > 0 {
        return Err(Error::Schema(format!(
            "{}: {} cells are empty or outside the real table's categories",
            args.synth.display(),
            synth.null_count()
        )));
    }
    let real = if real.null_count() > 0 {
        impute_nulls(&real, seed::derive(cfg.seed, "impute"))?
    } else {
        real
    };
    let task = match (&cfg.evaluation.target, cfg.evaluation.task) {
        (None, Some(t)) if t != Task::Skip => {
            return Err(Error::Config("an efficacy task needs --target".into()));
        }
        (None, _) => Task::Skip,
        (Some(_), Some(t)) => t,
        (Some(name), None) => {
            let j = real
                .column_index(name)
                .ok_or_else(|| Error::Eval(format!("no column named '{name}'")))?;
            if real.schema()[j].kind == ColumnKind::Continuous {
                Task::Regress
            } else {
                Task::Classify
            }
        }
    };
    cfg.evaluation.task = Some(task);
    let rel = reliability(&real, &synth, &cfg.reliability)?;
    let marginals = marginal_distance(&real, &synth)?;
    let efficacy = match (task, &cfg.evaluation.target) {
        (Task::Classify, Some(t)) => Some(Efficacy::Classify {
            target: t.clone(),
            report: ml_efficacy_classify(&real, &synth, t, &cfg.efficacy)?,
        }),
        (Task::Regress, Some(t)) => Some(Efficacy::Regress {
            target: t.clone(),
            report: ml_efficacy_regress(&real, &synth, t, &cfg.efficacy)?,
        }),
        _ => None,
    };
    let config_json = cfg.to_json()?;
    let report = EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        run_id: run_id(&[config_json.as_bytes(), &real_bytes, &synth_bytes]),
        command: "evaluate".into(),
        real: InputSummary::of(&real, &real_bytes),
        synth: InputSummary::of(&synth, &synth_bytes),
        reliability: rel,
        marginals,
        efficacy,
        artifacts: [CONFIG_FILE, REPORT_FILE, REPORT_CSV_FILE].map(String::from).to_vec(),
        config: cfg,
    };
    let files = vec![
        (CONFIG_FILE, config_json.into_bytes()),
        (REPORT_FILE, (serde_json::to_string_pretty(&report)? + "\n").into_bytes()),
        (REPORT_CSV_FILE, report.to_csv().into_bytes()),
    ];
    commit_dir(&args.out, args.force, &files)?;
    Ok(report)
}

/// Per-layer lines followed by the aggregate line.
pub fn cmd_monitor_report(args: &MonitorArgs) -> Result<String> {
    let series = read_series(&args.series)?;
    let onsets = onset_report(&series, args.window, args.k)?;
    let mut s = String::new();
    for (layer, onset) in onsets {
        match onset {
            Some(i) => writeln!(s, "{layer}: onset at iteration {i}").unwrap(),
            None => writeln!(s, "{layer}: stable").unwrap(),
        }
    }
    Ok(s)
}

/// Runs one command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Fit(a) => {
            let r = cmd_fit(a)?;
            let agg = r.monitor.layers.last().map_or_else(
                || r.monitor.note.clone().unwrap_or_default(),
                |l| l.onset.map_or("stable".to_string(), |i| format!("onset at iteration {i}")),
            );
            Ok(format!(
                "fit {}: {} rows, width {}, {} iterations, aggregate {agg}\nwrote {} artifacts to {}\n",
                r.run_id,
                r.input.rows,
                r.encoded_width,
                r.iterations,
                r.artifacts.len(),
                a.out.display()
            ))
        }
        Command::Sample(a) => {
            let r = cmd_sample(a)?;
            Ok(format!("sampled {} rows (seed {}) to {}\n", r.n, r.seed, a.out.display()))
        }
        Command::Evaluate(a) => Ok(cmd_evaluate(a)?.to_text()),
        Command::MonitorReport(a) => cmd_monitor_report(a),
    }
}
