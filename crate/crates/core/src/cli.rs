//! Command-line front end: `gen`, `train`, `eval`, `ablate` and `export-matrix`.
//!
//! Every command writes byte-identical files for identical inputs. Exit
//! codes: 0 success, 2 usage or configuration, 3 numerical failure,
//! 4 incompatible checkpoint, 5 mode error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crf::{heatmap_svg, row_argmax_agreement, CrfConfig, InitMode};
use crate::datagen::{sample_dataset, Dataset, GeneratorConfig};
use crate::decoder::{DecoderConfig, DurationMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{fmt_opt, MetricsReport};
use crate::training::checkpoint::{config_hash, Checkpoint};
use crate::training::eval::{evaluate, frequency_groups, EvalConfig};
use crate::training::{log_csv, segment_corpus, train_with_progress, Model, ModelSpec, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.tcca";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

/// Toggles accepted in an ablation grid.
pub const ABLATION_TOGGLES: [&str; 10] = [
    "use_crf",
    "use_bacr_past",
    "use_bacr_fut",
    "use_smooth",
    "set_prediction",
    "duration_mode",
    "crf_init",
    "K",
    "omega",
    "lambda",
];

/// The JSON run configuration. Every section is optional and defaults as
/// shown by `tcca --help`; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub crf: CrfConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn model_spec(&self, dataset: &Dataset) -> ModelSpec {
        ModelSpec::new(dataset.classes, dataset.feature_dim, &self.encoder, &self.decoder, &self.crf, &self.train)
    }
}

#[derive(Debug, Parser)]
#[command(name = "tcca", version, about = "Long-term action anticipation on synthetic video features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print its manifest hash.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.tcca and train_log.csv into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split; writes metrics.csv and metrics.json into --out.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every combination of a toggle grid into one CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON object mapping toggle names to lists of values.
        #[arg(long)]
        grid: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export learned transitions as CSV and SVG; repeat --checkpoint to compare.
    ExportMatrix {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } | Error::NonFiniteFeatures => 3,
        Error::Incompatible(_) => 4,
        Error::Mode(_) => 5,
        _ => 2,
    }
}

fn command() -> clap::Command {
    let defaults = serde_json::to_string_pretty(&RunConfigFile::default()).expect("defaults serialize");
    Cli::command().after_long_help(format!(
        "Configuration file (all keys optional, unknown keys rejected). Defaults:\n{defaults}\n\n\
         Ablation toggles: {}\n\
         Environment: TCCA_THREADS caps the worker count.\n\
         Exit codes: 0 ok, 2 usage/config, 3 numerical failure, 4 incompatible, 5 mode error.",
        ABLATION_TOGGLES.join(", ")
    ))
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out } => {
            let hash = cmd_gen(&RunConfigFile::load(&config)?, &out)?;
            println!("{hash}");
        }
        Command::Train { config, data, out } => {
            cmd_train(&RunConfigFile::load(&config)?, &data, &out)?;
        }
        Command::Eval { checkpoint, data, out } => {
            let report = cmd_eval(&checkpoint, &data, &out)?;
            print!("{}", summary(&report));
        }
        Command::Ablate { config, data, grid, out } => {
            let grid = load_grid(&grid)?;
            cmd_ablate(&RunConfigFile::load(&config)?, &data, &grid, &out)?;
        }
        Command::ExportMatrix { checkpoint, out } => {
            for line in cmd_export_matrix(&checkpoint, &out)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// Writes the dataset under `out` and returns the manifest hash.
pub fn cmd_gen(cfg: &RunConfigFile, out: &Path) -> Result<String> {
    let spec = cfg.generator.build_spec()?;
    let data = sample_dataset(&spec, cfg.generator.n_train, cfg.generator.n_test)?;
    create_dir(out)?;
    data.save(out).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot write dataset to {}: {io}", out.display())),
        other => other,
    })
}

/// Trains on `data` and writes the checkpoint and epoch log under `out`.
pub fn cmd_train(cfg: &RunConfigFile, data: &Path, out: &Path) -> Result<Checkpoint> {
    let dataset = Dataset::load(data)?;
    let model = Model::new(&cfg.model_spec(&dataset), Some(&segment_corpus(&dataset.train)))?;
    let outcome = train_with_progress(model, &dataset, &cfg.train, |r| {
        let parts: Vec<String> = r.values.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        eprintln!("epoch {:>3} {}", r.epoch, parts.join(" "));
    })?;
    let ck = Checkpoint::from_model(&outcome.model, &cfg.train, &cfg.eval, Some(&outcome.optimizer), cfg.train.epochs);
    create_dir(out)?;
    write_file(&out.join(CHECKPOINT_FILE), ck.to_bytes())?;
    write_file(&out.join(TRAIN_LOG_FILE), log_csv(&outcome.log))?;
    Ok(ck)
}

/// Loads a checkpoint and checks its integrity hash.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    let expected = config_hash(&ck.meta.model, &ck.meta.train);
    if ck.meta.config_hash != expected {
        return Err(Error::Incompatible(format!("config hash {} does not match its settings", ck.meta.config_hash)));
    }
    let model = ck.to_model().map_err(|e| Error::Incompatible(format!("parameters do not fit the model: {e}")))?;
    Ok((ck, model))
}

/// Evaluates a checkpoint on the test split of `data`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<MetricsReport> {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let dataset = Dataset::load(data)?;
    check_compatible(&model.spec, &dataset)?;
    let report = evaluate_model(&model, &dataset, &ck.meta.eval, ck.meta.train.sample_rate)?;
    create_dir(out)?;
    write_file(&out.join(METRICS_CSV), report.to_csv())?;
    write_file(&out.join(METRICS_JSON), report.to_json())?;
    Ok(report)
}

fn check_compatible(spec: &ModelSpec, dataset: &Dataset) -> Result<()> {
    if (spec.classes, spec.feature_dim) != (dataset.classes, dataset.feature_dim) {
        return Err(Error::Incompatible(format!(
            "model expects {} classes and {} features, dataset has {} and {}",
            spec.classes, spec.feature_dim, dataset.classes, dataset.feature_dim
        )));
    }
    Ok(())
}

pub fn evaluate_model(model: &Model, dataset: &Dataset, eval: &EvalConfig, sample_rate: usize) -> Result<MetricsReport> {
    let groups = model.spec.set_prediction.then(|| frequency_groups(&dataset.train, dataset.classes));
    evaluate(model, &dataset.test, dataset.classes, eval, sample_rate, groups.as_deref())
}

/// Human-readable metrics in percent.
pub fn summary(report: &MetricsReport) -> String {
    let mut out = String::new();
    for e in &report.moc {
        writeln!(out, "MoC  alpha={} beta={}  {:.2}", e.alpha, e.beta, 100.0 * e.value).unwrap();
    }
    for (name, v) in [
        ("Acc", report.seg_acc),
        ("Edit", report.edit),
        ("F1@10", report.f1_10),
        ("F1@25", report.f1_25),
        ("F1@50", report.f1_50),
    ] {
        writeln!(out, "{name:<6} {:.2}", 100.0 * v).unwrap();
    }
    for (name, v) in [("mAP", report.map_all), ("mAP-freq", report.map_freq), ("mAP-rare", report.map_rare)] {
        if let Some(v) = v {
            writeln!(out, "{name:<8} {:.2}", 100.0 * v).unwrap();
        }
    }
    out
}

/// An ablation grid: toggle name to candidate values, iterated in key order.
pub type Grid = BTreeMap<String, Vec<Value>>;

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
    let grid: Grid = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    validate_grid(&grid)?;
    Ok(grid)
}

pub fn validate_grid(grid: &Grid) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let probe = RunConfigFile::default();
    for (name, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("toggle `{name}` has no values")));
        }
        for v in values {
            apply_toggle(&mut probe.clone(), name, v)?;
        }
    }
    Ok(())
}

fn apply_toggle(cfg: &mut RunConfigFile, name: &str, value: &Value) -> Result<()> {
    let bad = || Error::Config(format!("invalid value {value} for toggle `{name}`"));
    let flag = || value.as_bool().ok_or_else(bad);
    let number = || value.as_f64().ok_or_else(bad);
    match name {
        "use_crf" => cfg.train.use_crf = flag()?,
        "use_bacr_past" => cfg.train.use_bacr_past = flag()?,
        "use_bacr_fut" => cfg.train.use_bacr_fut = flag()?,
        "use_smooth" => cfg.train.use_smooth = flag()?,
        "set_prediction" => cfg.train.set_prediction = flag()?,
        "duration_mode" => cfg.decoder.duration_mode = DurationMode::deserialize(value).map_err(|_| bad())?,
        "crf_init" => cfg.crf.init_mode = InitMode::deserialize(value).map_err(|_| bad())?,
        "K" => cfg.decoder.queries = value.as_u64().ok_or_else(bad)? as usize,
        "omega" => cfg.crf.omega = number()?,
        "lambda" => cfg.train.lambda = number()?,
        _ => return Err(Error::Config(format!("unknown toggle `{name}`; expected one of {}", ABLATION_TOGGLES.join(", ")))),
    }
    cfg.validate()
}

fn toggle_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Every combination of the grid, last key varying fastest.
pub fn grid_combinations(grid: &Grid) -> Vec<Vec<(&str, &Value)>> {
    let mut combos: Vec<Vec<(&str, &Value)>> = vec![Vec::new()];
    for (name, values) in grid {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((name.as_str(), v));
                    c
                })
            })
            .collect();
    }
    combos
}

/// Trains and evaluates each grid combination; writes one CSV row per
/// (combination, metric, alpha, beta) and returns the CSV text.
pub fn cmd_ablate(cfg: &RunConfigFile, data: &Path, grid: &Grid, out: &Path) -> Result<String> {
    validate_grid(grid)?;
    let dataset = Dataset::load(data)?;
    let corpus = segment_corpus(&dataset.train);
    let mut csv = String::new();
    for name in grid.keys() {
        write!(csv, "{name},").unwrap();
    }
    csv.push_str("metric,alpha,beta,value\n");
    let combos = grid_combinations(grid);
    for (i, combo) in combos.iter().enumerate() {
        let mut run = cfg.clone();
        for (name, value) in combo {
            apply_toggle(&mut run, name, value)?;
        }
        let label: Vec<String> = combo.iter().map(|(_, v)| toggle_text(v)).collect();
        eprintln!("ablate {}/{}: {}", i + 1, combos.len(), label.join(","));
        let model = Model::new(&run.model_spec(&dataset), Some(&corpus))?;
        let outcome = train_with_progress(model, &dataset, &run.train, |_| {})?;
        let report = evaluate_model(&outcome.model, &dataset, &run.eval, run.train.sample_rate)?;
        for (metric, alpha, beta, value) in report.rows() {
            writeln!(csv, "{},{metric},{},{},{value:.6}", label.join(","), fmt_opt(alpha), fmt_opt(beta)).unwrap();
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, &csv)?;
    Ok(csv)
}

/// Writes `transitions[_i].csv` and `.svg` for each checkpoint under `out`
/// and returns the stdout report, including row-argmax agreement of every
/// further checkpoint with the first.
pub fn cmd_export_matrix(checkpoints: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("at least one --checkpoint is required".into()));
    }
    let mut matrices = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let (_, model) = load_checkpoint(path)?;
        if !model.spec.use_crf {
            return Err(Error::Mode(format!("{} was trained without the CRF", path.display())));
        }
        matrices.push(model.transition_matrix());
    }
    create_dir(out)?;
    let mut lines = Vec::new();
    for (i, t) in matrices.iter().enumerate() {
        let stem = if matrices.len() == 1 { "transitions".to_string() } else { format!("transitions_{i}") };
        write_file(&out.join(format!("{stem}.csv")), t.to_csv())?;
        write_file(&out.join(format!("{stem}.svg")), heatmap_svg(&t.exp_normalized(), &t.label_names()))?;
        lines.push(format!("{stem}: {}", checkpoints[i].display()));
    }
    for (i, t) in matrices.iter().enumerate().skip(1) {
        if t.classes() != matrices[0].classes() {
            return Err(Error::Incompatible("checkpoints have different class counts".into()));
        }
        let rows: Vec<usize> = (0..t.classes()).collect();
        let agree = row_argmax_agreement(&matrices[0], t, &rows);
        lines.push(format!("row-argmax agreement transitions_0 vs transitions_{i}: {:.2}%", 100.0 * agree));
    }
    Ok(lines)
}

/// Builds the global thread pool from `TCCA_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("TCCA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("TCCA_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
