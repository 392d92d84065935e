//! Command-line front end: `train`, `bench`, `params`, `report`, `fetch-data`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::basis::Elementwise;
use crate::bench::{bench_suite, to_csv, MachineInfo, DEFAULT_N, DEFAULT_REPEATS};
use crate::data::{load_dataset, DatasetName, IDX_FILES};
use crate::error::Error;
use crate::models::{build_model, Combine, ModelConfig, ModelKind};
use crate::training::{aggregate_runs, train_runs, AggregateMetrics, RunMetrics, TrainConfig};

pub const DATA_DIR_ENV: &str = "FCKAN_DATA_DIR";

/// What went wrong, and therefore which exit code to use.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations: exit 2.
    Usage(String),
    /// Data, I/O, numerical or mismatch failures: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) | Error::UnsupportedKind(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fckan", version, about = "KANs with fast element-wise basis functions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a model for several seeds and write an experiment record.
    Train(TrainArgs),
    /// Time every basis function over a large input array.
    Bench(BenchArgs),
    /// Print per-layer and total parameter counts.
    Params(ParamsArgs),
    /// Render experiment records as a Markdown table.
    Report(ReportArgs),
    /// Download the four IDX files of a dataset with curl.
    FetchData(FetchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "fc-kan")]
    pub model: String,
    /// Comma-separated, e.g. `sin,cos` (fc-kan only).
    #[arg(long, value_delimiter = ',')]
    pub functions: Vec<String>,
    #[arg(long)]
    pub combine: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "784,64,10")]
    pub widths: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    /// Defaults to 25 for mnist and 35 for fashion-mnist.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.8)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Defaults to 0..runs.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data_dir: PathBuf,
    /// Train on only the first N training samples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Run the seeds on separate threads.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub quiet: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = DEFAULT_N)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub expect: Option<usize>,
    /// Allowed relative mismatch in percent, e.g. `0.05%`.
    #[arg(long, default_value = "0.05%")]
    pub tolerance: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Glob patterns of experiment record JSON files.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data_dir: PathBuf,
    /// Print the commands without running them.
    #[arg(long)]
    pub dry_run: bool,
}

/// Run-level metadata stored next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub version: String,
    pub label: String,
    pub param_count: usize,
    pub machine: MachineInfo,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub timing: String,
    pub train_samples: usize,
    pub val_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub runs: Vec<RunMetrics>,
    pub aggregate: AggregateMetrics,
    pub meta: RecordMeta,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Turns model flags into a validated config.
pub fn model_config(args: &ModelArgs) -> CliResult<ModelConfig> {
    let kind: ModelKind = args.model.parse()?;
    if args.widths.len() < 2 || args.widths.contains(&0) {
        return Err(CliError::Usage(format!(
            "--widths needs at least two positive entries, got {:?}",
            args.widths
        )));
    }
    let functions = args
        .functions
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Elementwise>())
        .collect::<Result<Vec<_>, _>>()?;
    let combine = args.combine.as_deref().map(str::parse::<Combine>).transpose()?;
    if combine.is_some() && functions.len() < 2 {
        return Err(CliError::Usage(
            "--combine needs at least two --functions".into(),
        ));
    }
    let cfg = match kind {
        ModelKind::FcKan if functions.is_empty() => ModelConfig::for_kind(kind, &args.widths),
        ModelKind::FcKan => {
            ModelConfig::fc_kan(&args.widths, &functions, combine.unwrap_or_default())
        }
        _ if !functions.is_empty() || combine.is_some() => {
            return Err(CliError::Usage(format!(
                "--functions and --combine apply to fc-kan only, not {kind}"
            )))
        }
        _ => ModelConfig::for_kind(kind, &args.widths),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let dataset: DatasetName = args.dataset.parse()?;
    let mut cfg = TrainConfig::for_dataset(dataset);
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.batch_size = args.batch;
    cfg.lr0 = args.lr;
    cfg.gamma = args.gamma;
    cfg.weight_decay = args.weight_decay;
    cfg.parallel = args.parallel;
    cfg.runs = args.runs.unwrap_or(if args.seeds.is_empty() { 3 } else { args.seeds.len() });
    cfg.seeds = if args.seeds.is_empty() {
        (0..cfg.runs as u64).collect()
    } else {
        args.seeds.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn missing_data_hint(dir: &Path, dataset: DatasetName) -> String {
    format!(
        "expected {} (optionally .gz) under {} or {}; run `fckan fetch-data --dataset {dataset} --data-dir {}` or set {DATA_DIR_ENV}",
        IDX_FILES.join(", "),
        dir.join(dataset.name()).display(),
        dir.display(),
        dir.display()
    )
}

fn write_or_print(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(p, text).map_err(|e| Error::io(p, e))?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<ExperimentRecord> {
    let model_cfg = model_config(&args.model)?;
    let cfg = train_config(args)?;
    let started_at = unix_now();
    let (mut train, val) = load_dataset(cfg.dataset, &args.data_dir).map_err(|e| match e {
        Error::MissingFile { .. } => CliError::Runtime(format!(
            "{e}\n{}",
            missing_data_hint(&args.data_dir, cfg.dataset)
        )),
        other => other.into(),
    })?;
    if let Some(n) = args.train_limit {
        train = train.take(n);
    }
    let label = model_cfg.label();
    let quiet = args.quiet;
    let progress = move |seed: u64, m: &crate::training::EpochMetrics| {
        if !quiet {
            eprintln!(
                "[seed {seed}] epoch {:>2}  lr {:.3e}  loss {:.4}  train {:.2}%  val {:.2}%  f1 {:.2}%",
                m.epoch, m.lr, m.train_loss, m.train_accuracy, m.val_accuracy, m.val_f1
            );
        }
    };
    let runs = train_runs(&model_cfg, &cfg, &train, &val, Some(&progress))?;
    let aggregate = aggregate_runs(&runs)?;
    let record = ExperimentRecord {
        meta: RecordMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            label,
            param_count: build_model(&model_cfg)?.count_params(),
            machine: MachineInfo::current(),
            started_at,
            finished_at: unix_now(),
            timing: "wall time per run covers training and per-epoch validation".into(),
            train_samples: train.len(),
            val_samples: val.len(),
        },
        model: model_cfg,
        train: cfg,
        runs,
        aggregate,
    };
    let json = serde_json::to_string_pretty(&record).map_err(Error::from)? + "\n";
    write_or_print(args.out.as_deref(), &json)?;
    let a = &record.aggregate;
    eprintln!(
        "{}: val {} | f1 {} | {:.1}s/run",
        record.meta.label,
        cell(a.val_accuracy.mean, a.val_accuracy.std),
        cell(a.macro_f1.mean, a.macro_f1.std),
        a.wall_seconds
    );
    Ok(record)
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<String> {
    let results = bench_suite(args.n, args.repeats, args.seed)?;
    let machine = MachineInfo::current();
    eprintln!(
        "per-pass time on {}/{} ({} logical cpus, single-threaded{})",
        machine.os,
        machine.arch,
        machine.logical_cpus,
        if machine.debug_build { ", DEBUG build" } else { "" }
    );
    eprintln!("{:<8} {:>14} {:>12}", "function", "mean (us)", "std (us)");
    for r in &results {
        eprintln!("{:<8} {:>14.1} {:>12.1}", r.function, r.mean_us, r.std_us);
    }
    let csv = to_csv(&results);
    write_or_print(args.out.as_deref(), &csv)?;
    Ok(csv)
}

/// Parses `0.05%` or `0.05` as a percentage.
pub fn parse_tolerance(s: &str) -> CliResult<f64> {
    let t = s.trim();
    let t = t.strip_suffix('%').unwrap_or(t);
    match t.trim().parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(CliError::Usage(format!("bad --tolerance `{s}`"))),
    }
}

pub fn cmd_params(args: &ParamsArgs) -> CliResult<usize> {
    let cfg = model_config(&args.model)?;
    let tolerance = parse_tolerance(&args.tolerance)?;
    let model = build_model(&cfg)?;
    println!("{} {:?}", cfg.label(), cfg.widths);
    for (l, n) in model.layer_param_counts().iter().enumerate() {
        println!("  layer {l} ({} -> {}): {n}", cfg.widths[l], cfg.widths[l + 1]);
    }
    let total = model.count_params();
    println!("  total: {total}");
    if let Some(expect) = args.expect {
        let diff = 100.0 * (total as f64 - expect as f64).abs() / (expect.max(1) as f64);
        println!("  expected {expect}: off by {diff:.4}% (tolerance {tolerance}%)");
        if diff > tolerance {
            return Err(CliError::Runtime(format!(
                "parameter count {total} differs from {expect} by {diff:.4}%"
            )));
        }
    }
    Ok(total)
}

/// `mean ± std` with two decimals.
pub fn cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

pub fn load_records(patterns: &[String]) -> CliResult<Vec<(PathBuf, ExperimentRecord)>> {
    let mut paths = Vec::new();
    for pat in patterns {
        let entries = glob::glob(pat).map_err(|e| CliError::Usage(format!("bad glob `{pat}`: {e}")))?;
        for entry in entries {
            paths.push(entry.map_err(|e| CliError::Runtime(e.to_string()))?);
        }
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        return Err(CliError::Runtime(format!(
            "no experiment records match {}",
            patterns.join(" ")
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let rec = serde_json::from_str(&text)
                .map_err(|e| CliError::Runtime(format!("{}: malformed record: {e}", p.display())))?;
            Ok((p, rec))
        })
        .collect()
}

/// Markdown table, best cell per column in bold (highest accuracy and F1,
/// lowest time).
pub fn render_report(records: &[ExperimentRecord]) -> String {
    type Col = fn(&AggregateMetrics) -> (f64, f64);
    let cols: [(&str, Col, bool); 4] = [
        ("Train. Acc.", |a| (a.train_accuracy.mean, a.train_accuracy.std), true),
        ("Val. Acc.", |a| (a.val_accuracy.mean, a.val_accuracy.std), true),
        ("F1", |a| (a.macro_f1.mean, a.macro_f1.std), true),
        ("Time (s)", |a| (a.wall_seconds, f64::NAN), false),
    ];
    let mut s = String::from("| Model | Dataset | Params |");
    for (name, _, _) in &cols {
        s.push_str(&format!(" {name} |"));
    }
    s.push_str("\n|---|---|---:|");
    s.push_str(&"---:|".repeat(cols.len()));
    s.push('\n');
    let best: Vec<f64> = cols
        .iter()
        .map(|(_, f, high)| {
            let vals = records.iter().map(|r| f(&r.aggregate).0);
            if *high {
                vals.fold(f64::NEG_INFINITY, f64::max)
            } else {
                vals.fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    for r in records {
        s.push_str(&format!(
            "| {} | {} | {} |",
            r.meta.label, r.train.dataset, r.meta.param_count
        ));
        for ((_, f, _), b) in cols.iter().zip(&best) {
            let (mean, std) = f(&r.aggregate);
            let text = if std.is_nan() {
                format!("{mean:.2}")
            } else {
                cell(mean, std)
            };
            if records.len() > 1 && format!("{mean:.2}") == format!("{b:.2}") {
                s.push_str(&format!(" **{text}** |"));
            } else {
                s.push_str(&format!(" {text} |"));
            }
        }
        s.push('\n');
    }
    s
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<String> {
    let records: Vec<_> = load_records(&args.inputs)?.into_iter().map(|(_, r)| r).collect();
    let table = render_report(&records);
    write_or_print(args.out.as_deref(), &table)?;
    Ok(table)
}

pub fn cmd_fetch(args: &FetchArgs) -> CliResult {
    let dataset: DatasetName = args.dataset.parse()?;
    let dir = args.data_dir.join(dataset.name());
    if !args.dry_run {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for file in IDX_FILES {
        let url = format!("{}/{file}.gz", dataset.base_url());
        let dest = dir.join(format!("{file}.gz"));
        eprintln!("curl -fL -o {} {url}", dest.display());
        if args.dry_run {
            continue;
        }
        let status = Command::new("curl")
            .args(["-fL", "--retry", "3", "-o"])
            .arg(&dest)
            .arg(&url)
            .status()
            .map_err(|e| CliError::Runtime(format!("could not run curl: {e}")))?;
        if !status.success() {
            return Err(CliError::Runtime(format!("download of {url} failed ({status})")));
        }
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Cmd::Train(a) => cmd_train(a).map(drop),
        Cmd::Bench(a) => cmd_bench(a).map(drop),
        Cmd::Params(a) => cmd_params(a).map(drop),
        Cmd::Report(a) => cmd_report(a).map(drop),
        Cmd::FetchData(a) => cmd_fetch(a),
    }
}

/// Parses `std::env::args`, runs the command and maps the outcome to an
/// exit code (0 ok, 1 runtime failure, 2 usage error).
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn margs(model: &str, functions: &[&str], combine: Option<&str>) -> ModelArgs {
        ModelArgs {
            model: model.into(),
            functions: functions.iter().map(|s| s.to_string()).collect(),
            combine: combine.map(String::from),
            widths: vec![784, 64, 10],
        }
    }

    #[test]
    fn combine_without_functions_is_usage_error() {
        let err = model_config(&margs("fc-kan", &[], Some("sum"))).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = model_config(&margs("fc-kan", &["sin"], Some("sum"))).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = model_config(&margs("mlp", &["sin", "cos"], None)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(model_config(&margs("nope", &[], None)).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn fc_kan_flags() {
        let cfg = model_config(&margs("fc-kan", &["sin", "arctan"], Some("product"))).unwrap();
        assert_eq!(cfg.functions, vec![Elementwise::Sin, Elementwise::Arctan]);
        assert_eq!(cfg.combine, Combine::Product);
        let default = model_config(&margs("fc-kan", &[], None)).unwrap();
        assert_eq!(default.functions, vec![Elementwise::Sin, Elementwise::Cos]);
        let mut bad = margs("mlp", &[], None);
        bad.widths = vec![784];
        assert_eq!(model_config(&bad).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn tolerance_parsing() {
        assert_eq!(parse_tolerance("0.05%").unwrap(), 0.05);
        assert_eq!(parse_tolerance("1").unwrap(), 1.0);
        assert!(parse_tolerance("-1%").is_err());
        assert!(parse_tolerance("abc").is_err());
    }

    #[test]
    fn cell_format() {
        assert_eq!(cell(97.5, 0.5), "97.50 ± 0.50");
    }
}
