//! Command-line front end: `run`, `sweep` and `verify-data`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 missing or corrupt data.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::fedproto::{run_experiment_observed, ArchitectureKind, ExperimentConfig, ProtoError};
use crate::kpi::RunRecord;
use crate::mnist::{load_mnist, DataError, LabeledDataset, CLASSES};
use crate::netsim::LatencyModel;
use crate::report::{tradeoff_table, write_run_outputs, write_tradeoff};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub const MNIST_TRAIN_SIZE: usize = 60_000;
pub const MNIST_TEST_SIZE: usize = 10_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(#[from] clap::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(e)
                if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) =>
            {
                EXIT_OK
            }
            CliError::Usage(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ProtoError> for CliError {
    fn from(e: ProtoError) -> Self {
        match e {
            ProtoError::InvalidConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Federated learning architecture simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: CommandArgs,
}

#[derive(Debug, Subcommand)]
enum CommandArgs {
    /// Run one experiment and write its record.
    Run(ExperimentArgs),
    /// Run every architecture x participant-count combination and tabulate.
    Sweep(SweepArgs),
    /// Check the MNIST files and print label histograms.
    VerifyData(DataArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding the four MNIST IDX files (optionally gzipped)
    #[arg(long, value_name = "DIR", default_value = "data/mnist")]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Federation architecture [default: dfl]
    #[arg(long, value_enum)]
    arch: Option<ArchitectureKind>,
    /// Number of participants [default: 3]
    #[arg(long, value_name = "N")]
    nodes: Option<usize>,
    /// Federation rounds [default: 10]
    #[arg(long, value_name = "R")]
    rounds: Option<usize>,
    /// Local epochs per round [default: 3]
    #[arg(long, value_name = "E")]
    epochs: Option<usize>,
    /// Master seed for every random stream [default: 7]
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// JSON experiment config; flags override its values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Output root; each run writes to <DIR>/<arch>_n<N>_s<seed>/
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Message latency: zero | fixed:D | uniform:LO:HI [default: zero]
    #[arg(long, value_name = "MODEL", value_parser = parse_latency)]
    latency: Option<LatencyModel>,
    /// Per-phase arrival deadline in simulated time units
    #[arg(long, value_name = "T")]
    deadline: Option<u64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Architectures to sweep (replaces --arch)
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "cfl,dfl,sdfl"
    )]
    arch_list: Vec<ArchitectureKind>,
    /// Participant counts to sweep (replaces --nodes)
    #[arg(long, value_delimiter = ',', default_value = "3,4,6,8")]
    nodes_list: Vec<usize>,
}

fn parse_latency(s: &str) -> Result<LatencyModel, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Sweep,
    VerifyData,
}

/// Fully resolved invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub command: Command,
    pub experiment: ExperimentConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub arch_list: Vec<ArchitectureKind>,
    pub nodes_list: Vec<usize>,
}

fn load_config_file(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn resolve(args: &ExperimentArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => load_config_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(arch) = args.arch {
        config.arch = arch;
    }
    if let Some(n) = args.nodes {
        config.n_participants = n;
    }
    if let Some(r) = args.rounds {
        config.rounds = r;
    }
    if let Some(e) = args.epochs {
        config.hyper.epochs_per_round = e;
    }
    if let Some(s) = args.seed {
        config.master_seed = s;
    }
    if let Some(l) = args.latency {
        config.latency = l;
    }
    if let Some(d) = args.deadline {
        config.round_deadline = Some(d);
    }
    config.validate()?;
    Ok(config)
}

pub fn parse_args<I, T>(argv: I) -> Result<CliConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    match cli.command {
        CommandArgs::Run(args) => Ok(CliConfig {
            command: Command::Run,
            experiment: resolve(&args)?,
            data_dir: args.data.data.clone(),
            out_dir: args.out.clone(),
            arch_list: Vec::new(),
            nodes_list: Vec::new(),
        }),
        CommandArgs::Sweep(args) => {
            if args.nodes_list.is_empty() || args.nodes_list.contains(&0) {
                return Err(CliError::Config(
                    "--nodes-list entries must be at least 1".to_owned(),
                ));
            }
            Ok(CliConfig {
                command: Command::Sweep,
                experiment: resolve(&args.experiment)?,
                data_dir: args.experiment.data.data.clone(),
                out_dir: args.experiment.out.clone(),
                arch_list: args.arch_list,
                nodes_list: args.nodes_list,
            })
        }
        CommandArgs::VerifyData(args) => Ok(CliConfig {
            command: Command::VerifyData,
            experiment: ExperimentConfig::default(),
            data_dir: args.data,
            out_dir: PathBuf::new(),
            arch_list: Vec::new(),
            nodes_list: Vec::new(),
        }),
    }
}

fn run_one(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<RunRecord, CliError> {
    let name = config.run_name();
    let record = run_experiment_observed(config, train, test, |_, r| {
        let a = &r.average;
        println!(
            "{name} round {:>3}: accuracy {:.4} loss {:.6} f1 {:.4} bytes {} dropped {}",
            r.round, a.accuracy, a.loss, a.f1, a.bytes_sent, r.dropped_messages
        );
    })?;
    Ok(record)
}

pub fn cmd_run(cli: &CliConfig) -> Result<(), CliError> {
    let (train, test) = load_mnist(&cli.data_dir)?;
    let record = run_one(&cli.experiment, &train, &test)?;
    let dir =
        write_run_outputs(&record, &cli.out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn cmd_sweep(cli: &CliConfig) -> Result<(), CliError> {
    let (train, test) = load_mnist(&cli.data_dir)?;
    let mut records = Vec::new();
    for &arch in &cli.arch_list {
        for &n in &cli.nodes_list {
            let config = ExperimentConfig {
                arch,
                n_participants: n,
                ..cli.experiment.clone()
            };
            let fail = |e: CliError| {
                let context = format!("sweep failed at {arch} n={n}: {e}");
                match e {
                    CliError::Config(_) => CliError::Config(context),
                    CliError::Data(_) => CliError::Runtime(context),
                    _ => CliError::Runtime(context),
                }
            };
            let record = run_one(&config, &train, &test).map_err(fail)?;
            write_run_outputs(&record, &cli.out_dir)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            records.push(record);
        }
    }
    let table = tradeoff_table(&records).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_tradeoff(&table, &cli.out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    print!("{}", table.render());
    Ok(())
}

fn histogram_line(name: &str, data: &LabeledDataset) -> String {
    let hist = data.class_histogram();
    let counts: Vec<String> = hist
        .iter()
        .enumerate()
        .map(|(c, n)| format!("{c}:{n}"))
        .collect();
    format!(
        "{name}: {} samples, width {}; labels {}",
        data.len(),
        data.width(),
        counts.join(" ")
    )
}

pub fn cmd_verify_data(dir: &Path) -> Result<(), CliError> {
    let (train, test) = load_mnist(dir)?;
    println!("{}", histogram_line("train", &train));
    println!("{}", histogram_line("test", &test));
    let mut problems = Vec::new();
    if train.len() != MNIST_TRAIN_SIZE {
        problems.push(format!(
            "train has {} samples, expected {MNIST_TRAIN_SIZE}",
            train.len()
        ));
    }
    if test.len() != MNIST_TEST_SIZE {
        problems.push(format!(
            "test has {} samples, expected {MNIST_TEST_SIZE}",
            test.len()
        ));
    }
    for (name, data) in [("train", &train), ("test", &test)] {
        let missing: Vec<usize> = (0..CLASSES)
            .filter(|&c| data.class_histogram()[c] == 0)
            .collect();
        if !missing.is_empty() {
            problems.push(format!("{name} is missing classes {missing:?}"));
        }
    }
    if problems.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::Data(DataError::Invalid(problems.join("; "))))
    }
}

/// Parses `argv`, dispatches and returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = parse_args(argv).and_then(|cli| match cli.command {
        Command::Run => cmd_run(&cli),
        Command::Sweep => cmd_sweep(&cli),
        Command::VerifyData => cmd_verify_data(&cli.data_dir),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(e)) => {
            let _ = e.print();
            CliError::Usage(e).exit_code()
        }
        Err(e) => {
            eprintln!("fedsim: {e}");
            e.exit_code()
        }
    }
}
