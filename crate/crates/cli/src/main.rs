use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{ConfigError, RunConfig, Scope};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "MODICL_OUT";

#[derive(Parser)]
#[command(name = "modicl", version, about = "In-context learning of modular linear functions")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; defaults are used when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
    /// Output directory; defaults to `$MODICL_OUT/<verb>` (or `runs/<verb>`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write task and input split manifests, the log table and sample sequences.
    GenData(Common),
    /// Train one model.
    Train(Common),
    /// Evaluate a trained run on every set, with corruption surfaces and prediction grids.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory holding `run_config.json` and checkpoints.
        #[arg(long)]
        run: PathBuf,
    },
    /// Train and classify a grid of (n_id, alpha) cells.
    Sweep(Common),
    /// Export oracle grids, or audit the oracles exhaustively.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Check soundness, subsumption and agreement over every task.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Attention, PCA, similarity and MLP analyses of a trained run.
    Interp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
    },
    /// Summarize a run or sweep directory as markdown and SVG.
    Report {
        /// Run or sweep directory.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

/// Anything that is not a configuration problem is a runtime failure.
pub fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn out_dir(common: &Common, verb: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(verb)
    })
}

fn load(common: &Common, scope: Scope) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(common.config.as_deref(), &common.sets, scope)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.verb {
        Verb::GenData(c) => commands::gen_data(&load(&c, Scope::Data)?, &out_dir(&c, "gen-data")),
        Verb::Train(c) => commands::train(&load(&c, Scope::Run)?, &out_dir(&c, "train")),
        Verb::Eval { common, run } => {
            let cfg = commands::run_config(&common.config, &common.sets, &run)?;
            commands::eval(&cfg, &run, &common.out.clone().unwrap_or_else(|| run.join("eval")))
        }
        Verb::Sweep(c) => commands::sweep(&load(&c, Scope::Sweep)?, &out_dir(&c, "sweep")),
        Verb::Oracle { common, exhaustive } => commands::oracle(&load(&common, Scope::Oracle)?, &out_dir(&common, "oracle"), exhaustive),
        Verb::Interp { common, run } => {
            let cfg = commands::run_config(&common.config, &common.sets, &run)?;
            commands::interp(&cfg, &run, &common.out.clone().unwrap_or_else(|| run.join("interp")))
        }
        Verb::Report { run } => commands::report(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(1),
                CliError::Runtime(_) => ExitCode::from(2),
            }
        }
    }
}
