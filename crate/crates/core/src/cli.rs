//! `multirater generate|train|eval|report`.
//!
//! Every command reads one JSON run config (or explicit paths) and writes
//! its outputs under a run directory together with a copy of the config.
//! Relative paths are resolved against the working directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{self, Dataset, DatasetManifest, GenConfig, Split};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{self, MetricsReport, SampleSet};
use crate::network::{Model, NetworkConfig, Variant};
use crate::training::{self, TrainConfig};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Annotations {
    Aligned,
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Q-score levels; raters + 1 when absent.
    pub levels: Option<usize>,
    pub n_mc: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { levels: None, n_mc: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub variant: String,
    pub annotations: Annotations,
    pub output_dir: PathBuf,
    /// Dataset manifest; `<output_dir>/data/manifest.json` when absent.
    pub manifest: Option<PathBuf>,
    pub generate: GenConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            variant: "om".into(),
            annotations: Annotations::Aligned,
            output_dir: PathBuf::from("runs/default"),
            manifest: None,
            generate: GenConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(cfg)
    }

    /// Parses a config. Fields missing from `train` take the defaults of the
    /// configured variant.
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let variant = value
            .get("variant")
            .and_then(|v| v.as_str())
            .and_then(|v| v.parse::<Variant>().ok());
        if let (Some(variant), Some(obj)) = (variant, value.as_object_mut()) {
            let mut train = serde_json::to_value(TrainConfig::for_variant(variant))?;
            if let Some(user) = obj.remove("train") {
                merge(&mut train, user);
            }
            obj.insert("train".into(), train);
        }
        serde_json::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {RUN_CONFIG_VERSION})",
                self.version
            )));
        }
        self.variant()?;
        self.generate.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.metrics.n_mc == 0 || self.metrics.levels == Some(0) {
            return Err(Error::Config("metrics.n_mc and metrics.levels must be >= 1".into()));
        }
        let div = 1usize << (self.network.depth - 1);
        if !self.generate.image_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^(depth-1) = {div}",
                self.generate.image_size
            )));
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.output_dir.join("data").join("manifest.json"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Parser)]
#[command(name = "multirater", version, about = "Multi-rater segmentation: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-rater dataset.
    Generate(RunArgs),
    /// Train a model and write its checkpoint and log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a metrics report.
    Eval(EvalArgs),
    /// Tabulate metrics reports side by side.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n_mc: usize,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Report path; `report.json` next to the checkpoint by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write `<case>_error.png` and `<case>_gamma.png` into `maps/` beside
    /// the report.
    #[arg(long)]
    pub emit_maps: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.generate.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// SHA-256 over the manifest and every file it references, in order.
pub fn dataset_checksum(manifest_path: &Path) -> Result<String> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut hasher = Sha256::new();
    hasher.update(fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?);
    for case in &manifest.cases {
        for rel in std::iter::once(&case.image).chain(&case.masks) {
            let path = base.join(rel);
            hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn cmd_generate(args: &RunArgs) -> Result<String> {
    let cfg = resolve(args)?;
    ensure_dir(&cfg.output_dir)?;
    let data_dir = cfg.output_dir.join("data");
    let manifest = data::generate_dataset(&cfg.generate, &data_dir)?;
    cfg.save(&cfg.output_dir.join("config.json"))?;
    let manifest_path = data_dir.join("manifest.json");
    let checksum = dataset_checksum(&manifest_path)?;
    let test = manifest.cases.iter().filter(|c| c.split == Split::Test).count();
    Ok(format!(
        "wrote {} cases ({} train, {test} test) with raters [{}] to {}\ndataset checksum: {checksum}\n",
        manifest.cases.len(),
        manifest.cases.len() - test,
        manifest.raters.join(", "),
        manifest_path.display()
    ))
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let mut cfg = resolve(&args.run)?;
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    let variant = cfg.variant()?;
    let dataset = Dataset::load(&cfg.manifest_path())?.training_pool();
    let dataset = match cfg.annotations {
        Annotations::Aligned => dataset,
        Annotations::Shuffled => data::shuffle_annotations(&dataset, cfg.train.seed),
    };
    let model = Model::build(variant, &cfg.network, cfg.train.seed)?;
    let outcome = training::train(&model, &dataset.cases, &cfg.train)?;

    ensure_dir(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join("model.ckpt");
    checkpoint::save(&outcome.model, &ckpt)?;
    let reloaded = checkpoint::load(&ckpt)?;
    if reloaded.params() != outcome.model.params() {
        return Err(Error::Checkpoint(format!("{}: reload does not match the trained model", ckpt.display())));
    }
    let log_path = cfg.output_dir.join("train_log.ndjson");
    outcome.log.write(&log_path)?;
    cfg.save(&cfg.output_dir.join("config.json"))?;
    let last = outcome.log.records.last().expect("epochs >= 1");
    Ok(format!(
        "trained {variant} for {} epochs on {} cases: final loss {:.5}\ncheckpoint: {}\nlog: {}\n",
        cfg.train.epochs,
        dataset.len(),
        last.loss,
        ckpt.display(),
        log_path.display()
    ))
}

fn as_f64(grids: &[Grid<f32>]) -> Vec<Grid<f64>> {
    grids.iter().map(|g| g.map(|&v| v as f64)).collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let model = checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.manifest)?;
    let cases = match args.split {
        SplitArg::Test => dataset.split(Split::Test),
        SplitArg::Train => dataset.training_pool(),
        SplitArg::All => dataset,
    };
    if cases.is_empty() {
        return Err(Error::EmptySet("evaluation split"));
    }
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("report.json")
    });
    let report_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    ensure_dir(report_dir)?;
    let maps_dir = report_dir.join("maps");
    if args.emit_maps {
        ensure_dir(&maps_dir)?;
    }
    let report = metrics::evaluate_with(&model, &cases.cases, args.n_mc, args.levels, args.seed, |case, pred| {
        if !args.emit_maps {
            return Ok(());
        }
        let probs = as_f64(&pred.sample_probs);
        let error = metrics::error_map(&SampleSet::new(case.rater_masks.clone())?, &probs)?;
        let gamma = metrics::gamma_map(&probs)?;
        let max = -(metrics::CE_EPSILON.ln());
        data::write_scaled_png(&maps_dir.join(format!("{}_error.png", case.case_id)), &error, max)?;
        data::write_scaled_png(&maps_dir.join(format!("{}_gamma.png", case.case_id)), &gamma, max)
    })?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&out, text + "\n").map_err(|e| Error::io(&out, e))?;
    Ok(format!(
        "{}: q_score {:.4} ged {:.4} diversity {:.4} similarity {:.4} over {} cases\nreport: {}\n",
        model.variant(),
        report.q_score,
        report.ged,
        report.diversity,
        report.similarity,
        report.per_case.len(),
        out.display()
    ))
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let recomputed = MetricsReport::from_cases(report.variant.clone(), report.per_case.clone())
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let pairs = [
        ("q_score", report.q_score, recomputed.q_score),
        ("ged", report.ged, recomputed.ged),
        ("diversity", report.diversity, recomputed.diversity),
        ("similarity", report.similarity, recomputed.similarity),
    ];
    for (name, stored, mean) in pairs {
        if !((stored - mean).abs() <= 1e-9) {
            return Err(Error::parse(
                path,
                format!("{name} = {stored} but the per-case mean is {mean}"),
            ));
        }
    }
    Ok(report)
}

/// One row per report, four metric columns.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("variant".len());
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>9}  {:>10}  {:>5}\n",
        "variant", "q_score", "ged", "diversity", "similarity", "cases"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>8.4}  {:>8.4}  {:>9.4}  {:>10.4}  {:>5}",
            r.q_score,
            r.ged,
            r.diversity,
            r.similarity,
            r.per_case.len()
        );
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let rows = args
        .reports
        .iter()
        .map(|p| {
            let report = load_report(p)?;
            let name = report
                .variant
                .clone()
                .unwrap_or_else(|| p.display().to_string());
            Ok((name, report))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = format_table(&rows);
    if let Some(out) = &args.out {
        fs::write(out, &table).map_err(|e| Error::io(out, e))?;
    }
    Ok(table)
}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}
