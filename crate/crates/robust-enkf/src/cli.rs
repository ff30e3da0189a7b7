//! Command-line front end: benchmark tables, bandwidth sweeps, and
//! trajectory plots.
//!
//! Engine grids use a small spec syntax: `enkf`, `mc:<sigma>`,
//! `mc:adaptive`, or `mc:inf`. Outputs land in `--output-dir` as
//! `results.csv` / `results.json` (bench), `sweep.csv` (sweep), and one
//! `trajectory_dim<i>.svg` per state dimension (plot).
//!
//! Byte-reproducibility: by default `cpu_seconds` is written as zero so a
//! repeated invocation with the same flags and seed produces identical
//! files; pass `--timing` to record measured wall-clock instead.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::benchmark::{
    self, BenchmarkSpec, EngineSpec, RunResult, DEFAULT_ENSEMBLE_SIZE, DEFAULT_RUNS,
    DEFAULT_STEPS,
};
use crate::chart::{self, Series};
use crate::correntropy::KernelBandwidth;
use crate::error::{Error, Result};

/// Environment variable consulted when `--seed` is not given.
pub const SEED_ENV: &str = "ROBUST_ENKF_SEED";
const DEFAULT_SEED: u64 = 42;
const DEFAULT_SIGMA_GRID: [f64; 6] = [0.1, 0.5, 2.0, 5.0, 10.0, 10000.0];

#[derive(Parser)]
#[command(
    name = "robust-enkf",
    version,
    about = "Ensemble Kalman filtering benchmarks under heavy-tailed observation noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run a benchmark over an engine grid and write MSE/timing tables
    Bench(BenchArgs),
    /// Sweep kernel bandwidths and report MSE and relative gain gap
    Sweep(SweepArgs),
    /// Plot truth against engine estimates for a single run
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchmarkKind {
    Linear,
    Nonlinear,
}

impl BenchmarkKind {
    fn name(self) -> &'static str {
        match self {
            BenchmarkKind::Linear => "linear",
            BenchmarkKind::Nonlinear => "nonlinear",
        }
    }

    fn spec(self) -> BenchmarkSpec {
        match self {
            BenchmarkKind::Linear => benchmark::linear_benchmark(),
            BenchmarkKind::Nonlinear => benchmark::nonlinear_benchmark(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Benchmark system
    #[arg(long, value_enum, default_value_t = BenchmarkKind::Linear)]
    pub benchmark: BenchmarkKind,
    /// Engine spec (repeatable): enkf | mc:<sigma> | mc:adaptive | mc:inf.
    /// Defaults to the full table grid.
    #[arg(long = "engine")]
    pub engines: Vec<String>,
    /// Monte Carlo runs
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    /// Steps per run
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Ensemble members per engine
    #[arg(long, default_value_t = DEFAULT_ENSEMBLE_SIZE)]
    pub ensemble_size: usize,
    /// Base seed; falls back to ROBUST_ENKF_SEED, then 42
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    /// Output formats to write
    #[arg(long, value_delimiter = ',', default_values_t = [OutputFormat::Csv, OutputFormat::Json])]
    pub formats: Vec<OutputFormat>,
    /// Run Monte Carlo runs on a thread pool (results are seed-determined
    /// either way)
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set,
          num_args = 0..=1, default_missing_value = "true")]
    pub parallel: bool,
    /// Record measured wall-clock seconds instead of zeros (output is then
    /// no longer byte-reproducible)
    #[arg(long, default_value_t = false)]
    pub timing: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long, value_enum, default_value_t = BenchmarkKind::Linear)]
    pub benchmark: BenchmarkKind,
    /// Fixed bandwidths to sweep (the adaptive policy and the plain engine
    /// are always appended)
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMA_GRID)]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_ENSEMBLE_SIZE)]
    pub ensemble_size: usize,
    /// Base seed; falls back to ROBUST_ENKF_SEED, then 42
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set,
          num_args = 0..=1, default_missing_value = "true")]
    pub parallel: bool,
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long, value_enum, default_value_t = BenchmarkKind::Linear)]
    pub benchmark: BenchmarkKind,
    /// Engine spec (repeatable); defaults to `enkf` and `mc:5`
    #[arg(long = "engine")]
    pub engines: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_ENSEMBLE_SIZE)]
    pub ensemble_size: usize,
    /// Base seed; falls back to ROBUST_ENKF_SEED, then 42
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

/// Maps errors to the documented exit codes: 2 for configuration and
/// usage problems, 3 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Dimension(_) | Error::Domain(_) => 2,
        _ => 3,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Bench(args) => cmd_bench(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

/// Parses one engine token from the `enkf | mc:<sigma> | mc:adaptive |
/// mc:inf` mini-syntax; the token itself becomes the engine label.
pub fn parse_engine(token: &str, ensemble_size: usize) -> Result<EngineSpec> {
    let trimmed = token.trim();
    if trimmed == "enkf" {
        return Ok(EngineSpec::enkf(trimmed, ensemble_size));
    }
    if let Some(rest) = trimmed.strip_prefix("mc:") {
        let bandwidth = match rest {
            "adaptive" | "ada" => KernelBandwidth::Adaptive,
            "inf" | "infinite" => KernelBandwidth::Infinite,
            value => {
                let sigma: f64 = value.parse().map_err(|_| {
                    Error::Config(format!("engine spec `{trimmed}` has a malformed bandwidth"))
                })?;
                KernelBandwidth::Fixed(sigma)
            }
        };
        bandwidth.validate()?;
        return Ok(EngineSpec::mc(trimmed, ensemble_size, bandwidth));
    }
    Err(Error::Config(format!(
        "unrecognized engine spec `{trimmed}` (expected enkf, mc:<sigma>, mc:adaptive, or mc:inf)"
    )))
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(value) => value.trim().parse().map_err(|_| {
            Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{value}`"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(DEFAULT_SEED),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::Config(format!("{SEED_ENV} is not valid unicode")))
        }
    }
}

fn ensure_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|err| Error::Config(format!("output dir {} is not writable: {err}", dir.display())))
}

fn engine_tokens<'a>(given: &'a [String], defaults: &[&'a str]) -> Vec<&'a str> {
    if given.is_empty() {
        defaults.to_vec()
    } else {
        given.iter().map(String::as_str).collect()
    }
}

fn build_engines(tokens: &[&str], ensemble_size: usize) -> Result<Vec<EngineSpec>> {
    if tokens.is_empty() {
        return Err(Error::Config("at least one engine is required".into()));
    }
    tokens
        .iter()
        .map(|t| parse_engine(t, ensemble_size))
        .collect()
}

const TABLE_TOKENS: [&str; 8] = [
    "enkf",
    "mc:adaptive",
    "mc:0.1",
    "mc:0.5",
    "mc:2",
    "mc:5",
    "mc:10",
    "mc:10000",
];

#[derive(Serialize)]
struct BenchRow {
    label: String,
    mse: f64,
    cpu_seconds: f64,
}

#[derive(Serialize)]
struct BenchReport<'a> {
    command: &'a str,
    benchmark: &'a str,
    engines: Vec<&'a str>,
    runs: usize,
    steps: usize,
    ensemble_size: usize,
    seed: u64,
    jitter: f64,
    sigma_cap: f64,
    parallel: bool,
    timing: bool,
    output_dir: String,
    formats: Vec<String>,
    results: Vec<BenchRow>,
}

fn format_name(format: OutputFormat) -> &'static str {
    match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
        OutputFormat::Svg => "svg",
    }
}

fn bench_rows(result: &RunResult, timing: bool) -> Vec<BenchRow> {
    result
        .engines
        .iter()
        .map(|engine| BenchRow {
            label: engine.label.clone(),
            mse: engine.mse,
            cpu_seconds: if timing { engine.cpu_seconds } else { 0.0 },
        })
        .collect()
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let tokens = engine_tokens(&args.engines, &TABLE_TOKENS);
    let mut spec = args.benchmark.spec();
    spec.runs = args.runs;
    spec.steps = args.steps;
    spec.engines = build_engines(&tokens, args.ensemble_size)?;
    ensure_output_dir(&args.output_dir)?;

    let result = benchmark::run_benchmark(&spec, seed, args.parallel)?;
    let rows = bench_rows(&result, args.timing);

    if args.formats.contains(&OutputFormat::Csv) {
        let mut csv = String::from("label,mse,cpu_seconds\n");
        for row in &rows {
            csv.push_str(&format!(
                "{},{:.6},{:.6}\n",
                row.label, row.mse, row.cpu_seconds
            ));
        }
        fs::write(args.output_dir.join("results.csv"), csv)?;
    }
    if args.formats.contains(&OutputFormat::Json) {
        let report = BenchReport {
            command: "bench",
            benchmark: args.benchmark.name(),
            engines: tokens.clone(),
            runs: args.runs,
            steps: args.steps,
            ensemble_size: args.ensemble_size,
            seed,
            jitter: crate::filter::DEFAULT_JITTER,
            sigma_cap: crate::filter::DEFAULT_SIGMA_CAP,
            parallel: args.parallel,
            timing: args.timing,
            output_dir: args.output_dir.display().to_string(),
            formats: args.formats.iter().map(|f| format_name(*f).to_string()).collect(),
            results: rows,
        };
        let mut json = serde_json::to_string_pretty(&report)
            .map_err(|err| Error::Config(format!("report serialization failed: {err}")))?;
        json.push('\n');
        fs::write(args.output_dir.join("results.json"), json)?;
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    if args.sigmas.is_empty() {
        return Err(Error::Config("bandwidth sweep grid is empty".into()));
    }
    let mut spec = args.benchmark.spec();
    spec.runs = args.runs;
    spec.steps = args.steps;
    spec.engines = vec![EngineSpec::enkf("enkf", args.ensemble_size)];
    ensure_output_dir(&args.output_dir)?;

    let rows = benchmark::run_sweep(&spec, &args.sigmas, seed, args.parallel)?;
    let mut csv = String::from("sigma,mse,gain_gap\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6e}\n",
            row.sigma, row.mse, row.gain_gap
        ));
    }
    fs::write(args.output_dir.join("sweep.csv"), csv)?;
    Ok(())
}

/// Legend name matching the usual table labels, suffixed per dimension by
/// the caller.
fn display_label(token: &str) -> String {
    if token == "enkf" {
        return "EnKF".to_string();
    }
    match token.strip_prefix("mc:") {
        Some("adaptive") | Some("ada") => "MC-EnKF-Ada".to_string(),
        Some("inf") | Some("infinite") => "MC-EnKF(inf)".to_string(),
        Some(sigma) => format!("MC-EnKF({sigma})"),
        None => token.to_string(),
    }
}

pub fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let tokens = engine_tokens(&args.engines, &["enkf", "mc:5"]);
    let mut spec = args.benchmark.spec();
    spec.runs = 1;
    spec.steps = args.steps;
    spec.engines = build_engines(&tokens, args.ensemble_size)?;
    ensure_output_dir(&args.output_dir)?;

    let result = benchmark::run_benchmark(&spec, seed, false)?;
    let record = result
        .trajectories
        .as_ref()
        .ok_or_else(|| Error::Config("no trajectory data was captured".into()))?;

    for dim in 0..spec.model.state_dim() {
        let mut series = Vec::with_capacity(record.estimates.len() + 1);
        series.push(Series::new(
            format!("True-{}", dim + 1),
            record.truth.iter().map(|x| x[dim]).collect(),
        ));
        for (label, estimates) in &record.estimates {
            series.push(Series::new(
                format!("{}-{}", display_label(label), dim + 1),
                estimates.iter().map(|x| x[dim]).collect(),
            ));
        }
        let title = format!(
            "{} benchmark: truth vs estimates, dimension {}",
            args.benchmark.name(),
            dim + 1
        );
        let svg = chart::line_chart(&title, "time step", &series);
        fs::write(
            args.output_dir.join(format!("trajectory_dim{}.svg", dim + 1)),
            svg,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::EngineKind;

    #[test]
    fn engine_tokens_parse() {
        let spec = parse_engine("enkf", 10).unwrap();
        assert_eq!(spec.label, "enkf");
        assert_eq!(spec.config.engine, EngineKind::Enkf);

        let spec = parse_engine("mc:5", 10).unwrap();
        assert_eq!(spec.config.bandwidth, Some(KernelBandwidth::Fixed(5.0)));

        let spec = parse_engine("mc:adaptive", 10).unwrap();
        assert_eq!(spec.config.bandwidth, Some(KernelBandwidth::Adaptive));

        let spec = parse_engine("mc:inf", 10).unwrap();
        assert_eq!(spec.config.bandwidth, Some(KernelBandwidth::Infinite));
    }

    #[test]
    fn engine_tokens_reject_garbage() {
        assert!(matches!(parse_engine("ukf", 10), Err(Error::Config(_))));
        assert!(matches!(parse_engine("mc:", 10), Err(Error::Config(_))));
        assert!(matches!(parse_engine("mc:abc", 10), Err(Error::Config(_))));
        assert!(matches!(parse_engine("mc:-3", 10), Err(Error::Domain(_))));
    }

    #[test]
    fn exit_codes_distinguish_config_from_runtime() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Domain("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 3);
        assert_eq!(
            exit_code(&Error::AtRun {
                run: 0,
                source: Box::new(Error::NonFinite("x".into()))
            }),
            3
        );
    }

    #[test]
    fn display_labels_mirror_the_table_names() {
        assert_eq!(display_label("enkf"), "EnKF");
        assert_eq!(display_label("mc:adaptive"), "MC-EnKF-Ada");
        assert_eq!(display_label("mc:5"), "MC-EnKF(5)");
    }
}
