//! `csa2sls` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csa2sls::dataset::DataError;
use csa2sls::simulation::SubsetDraws;
use csa2sls::SignalShape;
use serde_json::{Map, Value};
use thiserror::Error;

use config::{RunConfig, SchemaSource};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingColumn(_) | DataError::Schema(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<csa2sls::Error> for CliError {
    fn from(e: csa2sls::Error) -> Self {
        match e {
            csa2sls::Error::Data(d) => d.into(),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "csa2sls", version, about = "Complete subset averaging 2SLS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a model on a CSV data set.
    Estimate(CommonArgs),
    /// Run Monte Carlo designs.
    Simulate(SimulateArgs),
    /// Export the selection criterion over k.
    Criterion(CriterionArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run configuration; flags take precedence over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON file mapping CSV columns to roles.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Comma-separated: ols, 2sls, dn, csa, csa.<k>.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated contrast weights, one per regressor.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    lambda: Option<Vec<f64>>,
    /// Random subsets per k, or `all`.
    #[arg(long = "subsets-R", value_parser = parse_draws)]
    subsets_r: Option<SubsetDraws>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fixed_k: Option<usize>,
    /// Leading instruments in the preliminary fit (Mallows selection otherwise).
    #[arg(long)]
    preliminary_k: Option<usize>,
    #[arg(long)]
    cluster_col: Option<String>,
    /// Confidence level for reported intervals.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rho_z: Option<f64>,
    #[arg(long)]
    sigma_ueps: Option<f64>,
    #[arg(long)]
    rf2: Option<f64>,
    #[arg(long, value_parser = parse_signal)]
    signal: Option<SignalShape>,
}

#[derive(Debug, Args)]
struct CriterionArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// JSON file with the population reduced form, for an oracle column.
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn parse_draws(s: &str) -> Result<SubsetDraws, String> {
    s.parse().map_err(|e: csa2sls::Error| e.to_string())
}

fn parse_signal(s: &str) -> Result<SignalShape, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl CommonArgs {
    fn into_config(self) -> (Option<PathBuf>, RunConfig) {
        let cfg = RunConfig {
            data: self.data,
            schema: self.schema.map(SchemaSource::File),
            methods: self.methods,
            lambda: self.lambda,
            subsets_r: self.subsets_r,
            seed: self.seed,
            fixed_k: self.fixed_k,
            preliminary_k: self.preliminary_k,
            cluster_col: self.cluster_col,
            level: self.level,
            reps: self.reps,
            jobs: self.jobs,
            out: self.out,
            truth: None,
            design: None,
        };
        (self.config, cfg)
    }
}

fn design_flags(a: &SimulateArgs) -> Option<Map<String, Value>> {
    let mut m = Map::new();
    let mut put = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(key.to_string(), v);
        }
    };
    put("n", a.n.map(Value::from));
    put("k", a.k.map(Value::from));
    put("rho_z", a.rho_z.map(Value::from));
    put("sigma_ueps", a.sigma_ueps.map(Value::from));
    put("rf2", a.rf2.map(Value::from));
    put("signal", a.signal.map(|s| Value::from(s.to_string())));
    (!m.is_empty()).then_some(m)
}

fn resolve(file: Option<PathBuf>, flags: RunConfig) -> Result<RunConfig, CliError> {
    let base = match file {
        Some(p) => RunConfig::from_file(&p)?,
        None => RunConfig::default(),
    };
    Ok(base.overlay(flags))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate(a) => {
            let (file, flags) = a.into_config();
            commands::estimate(&resolve(file, flags)?)
        }
        Command::Simulate(a) => {
            let design = design_flags(&a);
            let (file, mut flags) = a.common.into_config();
            flags.design = design;
            commands::simulate(&resolve(file, flags)?)
        }
        Command::Criterion(a) => {
            let (file, mut flags) = a.common.into_config();
            flags.truth = a.truth;
            commands::criterion(&resolve(file, flags)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("csa2sls: error[{}]: {msg}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
