//! Command-line driver. Every command writes into a fresh output directory
//! that is staged next to its destination and renamed into place only after
//! all artifacts were written.

pub mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ptrag_core::error::Error;
use ptrag_core::io::{read_json, write_atomic, write_json};
use ptrag_core::metrics::MetricsReport;
use ptrag_core::nn::ParamStore;
use ptrag_core::retrieval::PerturbationDb;
use ptrag_core::synthdata::{read_dataset, write_dataset, BenchmarkConfig, Dataset, Split};
use ptrag_core::trainer::{
    compare, evaluate, evaluation_pca, jaccard_analysis, restore, sweep, train_and_evaluate,
    SweepAxis, TrainConfig, CONFIG_SCHEMA,
};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.json";
pub const RECORD_FILE: &str = "record.json";
pub const SIGNIFICANCE_FILE: &str = "significance.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const JACCARD_FILE: &str = "jaccard.json";
pub const BENCHMARK_FILE: &str = "benchmark.json";

#[derive(Debug, Parser)]
#[command(name = "ptrag", version, about = "Retrieval-augmented perturbation response experiments")]
pub struct Cli {
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (must not exist unless --force).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory written by `gen`; the default benchmark is built
    /// in memory when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and split a synthetic dataset.
    Gen(#[command(flatten)] Common),
    /// Train one model and score the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Re-score a trained run.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Run directory holding config.json and checkpoint.bin.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["val", "test"])]
        split: String,
    },
    /// Train several models over several seeds and test their differences.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train over a range of lambda_sparse or K values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Cross-cell-type overlap of the contexts a pt_rag run selects.
    Jaccard {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        run: PathBuf,
    },
    /// Metric table over run or comparison directories.
    Report {
        /// Directories holding metrics.json or significance.json.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write report.txt and report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

/// Failure with its exit code: 2 for configuration and usage errors, 1 for
/// runtime errors.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub models: Vec<TrainConfig>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            schema_version: CONFIG_SCHEMA,
            models: ptrag_core::model::ModelKind::ALL
                .iter()
                .map(|&k| TrainConfig { model_kind: k, ..TrainConfig::default() })
                .collect(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub base: TrainConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            schema_version: CONFIG_SCHEMA,
            base: TrainConfig::default(),
            axis: SweepAxis::Lambda,
            values: vec![0.0, 0.01, 0.1, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub top_n: usize,
    /// Noise draws per sample when counting selections.
    pub passes: usize,
    pub seed: u64,
}

impl Default for JaccardConfig {
    fn default() -> Self {
        JaccardConfig { schema_version: CONFIG_SCHEMA, top_n: 3, passes: 4, seed: 0 }
    }
}

fn schema() -> u32 {
    CONFIG_SCHEMA
}

fn check_schema(version: u32) -> CliResult<()> {
    if version != CONFIG_SCHEMA {
        return Err(CliError::usage(format!(
            "invalid config: `schema_version` must satisfy == {CONFIG_SCHEMA}"
        )));
    }
    Ok(())
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
}

/// Output directory under construction.
struct Staged {
    target: PathBuf,
    tmp: PathBuf,
    force: bool,
}

impl Staged {
    fn new(target: &Path, force: bool) -> CliResult<Self> {
        if target.exists() && !force {
            return Err(CliError::usage(format!(
                "{} already exists; pass --force to replace it",
                target.display()
            )));
        }
        let parent = target
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let name = target
            .file_name()
            .ok_or_else(|| CliError::usage(format!("bad output path {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        fs::create_dir_all(parent).map_err(|e| CliError::runtime(e.to_string()))?;
        let tmp = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| CliError::runtime(e.to_string()))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| CliError::runtime(e.to_string()))?;
        Ok(Staged { target: target.to_path_buf(), tmp, force })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn commit(self) -> CliResult<()> {
        let io = |e: std::io::Error| CliError::runtime(e.to_string());
        if self.target.exists() && self.force {
            fs::remove_dir_all(&self.target).map_err(io)?;
        }
        fs::rename(&self.tmp, &self.target).map_err(io)?;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

fn load_data(arg: &DataArg) -> CliResult<(Dataset, PerturbationDb)> {
    match &arg.data {
        Some(dir) => {
            let (dataset, db, _) = read_dataset(dir)?;
            Ok((dataset, db))
        }
        None => Ok(BenchmarkConfig::default().build()?),
    }
}

fn write_checkpoint(path: &Path, store: &ParamStore) -> CliResult<()> {
    let mut bytes = Vec::new();
    store.write_checkpoint(&mut bytes)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn read_run(dir: &Path) -> CliResult<(TrainConfig, ParamStore)> {
    let cfg: TrainConfig = read_json(&dir.join(CONFIG_FILE))
        .map_err(|e| CliError::runtime(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
    let file = fs::File::open(dir.join(CHECKPOINT_FILE))
        .map_err(|e| CliError::runtime(format!("{}: {e}", dir.join(CHECKPOINT_FILE).display())))?;
    let params = ParamStore::read_checkpoint(std::io::BufReader::new(file))?;
    Ok((cfg, params))
}

fn overall(report: &MetricsReport, metric: &str) -> Option<f64> {
    report
        .aggregate
        .get(ptrag_core::metrics::OVERALL)
        .and_then(|m| m.get(metric))
        .map(|s| s.mean)
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Gen(c) => gen(&c, quiet),
        Command::Train { common, data } => train_cmd(&common, &data, quiet),
        Command::Eval { common, data, run, split } => eval_cmd(&common, &data, &run, &split, quiet),
        Command::Compare { common, data } => compare_cmd(&common, &data, quiet),
        Command::Sweep { common, data } => sweep_cmd(&common, &data, quiet),
        Command::Jaccard { common, data, run } => jaccard_cmd(&common, &data, &run, quiet),
        Command::Report { dirs, out, force } => report_cmd(&dirs, out.as_deref(), force, quiet),
    }
}

fn gen(c: &Common, quiet: bool) -> CliResult<()> {
    let mut cfg: BenchmarkConfig = load_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.synthetic.seed = seed;
    }
    let (dataset, db) = cfg.build()?;
    let out = Staged::new(&c.out, c.force)?;
    write_dataset(&out.tmp, &dataset, &db)?;
    write_json(&out.path(BENCHMARK_FILE), &cfg)?;
    out.commit()?;
    say(quiet, format!("wrote {} samples to {}", dataset.samples.len(), c.out.display()));
    Ok(())
}

fn train_config(c: &Common) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = load_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(c: &Common, data: &DataArg, quiet: bool) -> CliResult<()> {
    let cfg = train_config(c)?;
    let (dataset, db) = load_data(data)?;
    cfg.build_model(&dataset)?;
    let out = Staged::new(&c.out, c.force)?;
    let pca = evaluation_pca(&dataset)?;
    let result = train_and_evaluate(&cfg, &dataset, &db, &pca)?;
    let metrics = result.record.final_metrics.clone().expect("evaluated");
    write_json(&out.path(CONFIG_FILE), &cfg)?;
    write_checkpoint(&out.path(CHECKPOINT_FILE), &result.model.store)?;
    write_json(&out.path(METRICS_FILE), &metrics)?;
    write_json(&out.path(RECORD_FILE), &result.record)?;
    out.commit()?;
    say(
        quiet,
        format!(
            "{}: best step {} val energy {:.4}; test pearson_deg {:.4} energy {:.4} ({:.1}s)",
            cfg.model_kind.name(),
            result.record.best_step,
            result.record.best_val_dist,
            overall(&metrics, "pearson_deg").unwrap_or(f64::NAN),
            overall(&metrics, "energy").unwrap_or(f64::NAN),
            result.record.wall_clock_secs,
        ),
    );
    Ok(())
}

fn eval_cmd(c: &Common, data: &DataArg, run: &Path, split: &str, quiet: bool) -> CliResult<()> {
    let (cfg, params) = read_run(run)?;
    let (dataset, db) = load_data(data)?;
    let model = restore(&cfg, &dataset, &params)?;
    let split = if split == "val" { Split::Val } else { Split::Test };
    let out = Staged::new(&c.out, c.force)?;
    let metrics = evaluate(&model, &dataset, &db, split, &evaluation_pca(&dataset)?)?;
    write_json(&out.path(METRICS_FILE), &metrics)?;
    out.commit()?;
    say(
        quiet,
        format!(
            "{} on {}: pearson_deg {:.4}",
            cfg.model_kind.name(),
            split.name(),
            overall(&metrics, "pearson_deg").unwrap_or(f64::NAN)
        ),
    );
    Ok(())
}

fn compare_cmd(c: &Common, data: &DataArg, quiet: bool) -> CliResult<()> {
    let mut cfg: CompareConfig = load_config(c.config.as_deref())?;
    check_schema(cfg.schema_version)?;
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if cfg.models.is_empty() || cfg.seeds.is_empty() {
        return Err(CliError::usage(
            "invalid config: `models` and `seeds` must satisfy non-empty",
        ));
    }
    let (dataset, db) = load_data(data)?;
    for m in &cfg.models {
        m.build_model(&dataset)?;
    }
    let out = Staged::new(&c.out, c.force)?;
    let pca = evaluation_pca(&dataset)?;
    let (report, runs) = compare(&cfg.models, &dataset, &db, &pca, &cfg.seeds)?;
    for (summary, outcomes) in report.models.iter().zip(&runs) {
        for (seed, outcome) in cfg.seeds.iter().zip(outcomes) {
            let dir = out.path(&summary.label).join(format!("seed{seed}"));
            write_json(&dir.join(CONFIG_FILE), &outcome.record.config)?;
            write_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.model.store)?;
            if let Some(m) = &outcome.record.final_metrics {
                write_json(&dir.join(METRICS_FILE), m)?;
            }
        }
    }
    write_json(&out.path(CONFIG_FILE), &cfg)?;
    write_json(&out.path(SIGNIFICANCE_FILE), &report)?;
    out.commit()?;
    if !quiet {
        let table = report::render(&report::columns_from_compare(&report))?;
        print!("{}", table.text);
    }
    Ok(())
}

fn sweep_cmd(c: &Common, data: &DataArg, quiet: bool) -> CliResult<()> {
    let mut cfg: SweepConfig = load_config(c.config.as_deref())?;
    check_schema(cfg.schema_version)?;
    if let Some(seed) = c.seed {
        cfg.base.seed = seed;
    }
    cfg.base.validate()?;
    if cfg.values.is_empty() {
        return Err(CliError::usage("invalid config: `values` must satisfy non-empty"));
    }
    let (dataset, db) = load_data(data)?;
    let out = Staged::new(&c.out, c.force)?;
    let pca = evaluation_pca(&dataset)?;
    let result = sweep(&cfg.base, cfg.axis, &cfg.values, &dataset, &db, &pca)?;
    write_json(&out.path(CONFIG_FILE), &cfg)?;
    write_json(&out.path(SWEEP_FILE), &result)?;
    out.commit()?;
    for e in &result.entries {
        say(
            quiet,
            format!(
                "{:?}={}: selected {:.3}, pearson_deg {:.4}",
                cfg.axis,
                e.value,
                e.final_selected_count,
                e.test_overall.get("pearson_deg").copied().unwrap_or(f64::NAN)
            ),
        );
    }
    Ok(())
}

fn jaccard_cmd(c: &Common, data: &DataArg, run: &Path, quiet: bool) -> CliResult<()> {
    let mut cfg: JaccardConfig = load_config(c.config.as_deref())?;
    check_schema(cfg.schema_version)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let (train_cfg, params) = read_run(run)?;
    let (dataset, db) = load_data(data)?;
    let model = restore(&train_cfg, &dataset, &params)?;
    let out = Staged::new(&c.out, c.force)?;
    let result = jaccard_analysis(&model, &dataset, &db, cfg.top_n, cfg.passes, cfg.seed)?;
    write_json(&out.path(CONFIG_FILE), &cfg)?;
    write_json(&out.path(JACCARD_FILE), &result)?;
    out.commit()?;
    say(
        quiet,
        format!(
            "off-diagonal mean {:.4}, repeat overlap {:.4}, chance {:.4}",
            result.off_diagonal_mean, result.repeat_mean, result.chance_level
        ),
    );
    Ok(())
}

fn report_cmd(dirs: &[PathBuf], out: Option<&Path>, force: bool, quiet: bool) -> CliResult<()> {
    let mut columns = Vec::new();
    for dir in dirs {
        columns.extend(report::load_columns(dir)?);
    }
    let table = report::render(&columns)?;
    if let Some(out) = out {
        let staged = Staged::new(out, force)?;
        write_atomic(&staged.path("report.txt"), table.text.as_bytes())?;
        write_atomic(&staged.path("report.csv"), table.csv.as_bytes())?;
        staged.commit()?;
    }
    if !quiet {
        print!("{}", table.text);
    }
    Ok(())
}
