//! `gdgs` command-line tool.
//!
//! Settings resolve as command-line flag, then `--config` file key, then
//! built-in default. Errors print one `error category=... message=...` line
//! to stderr and exit with a code per category.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::io::Write;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigFile, Resolver};
use gdgs::{Error, Result};

const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_PARSE: u8 = 5;
const EXIT_INVALID_INPUT: u8 = 6;
const EXIT_NUMERIC: u8 = 7;
/// A check ran to completion and failed (gradcheck tolerance exceeded).
pub const EXIT_CHECK_FAILED: u8 = 8;

#[derive(Parser, Debug)]
#[command(name = "gdgs", version, about = "Gradient-domain Gaussian splatting")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat TOML file of settings; keys are flag names with '_' for '-'.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<String>,
    /// Worker threads (0 = all cores). Falls back to GDGS_THREADS. [default: 0]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log level: error, warn, info, debug or trace. [default: info]
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Print the effective settings as a config file and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create an initial scene with particles spread uniformly in a box.
    Init(commands::InitArgs),
    /// Optimize a scene against posed images.
    Train(commands::TrainArgs),
    /// Render one camera of a scene to PNG and PFM.
    Render(commands::RenderArgs),
    /// Solve the Neumann Poisson problem for a Laplacian field stored as PFM.
    Solve(commands::SolveArgs),
    /// Compare Cauchy scales of intensities and Laplacians, and sweep thresholds.
    AnalyzeSparsity(commands::AnalyzeArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(commands::GradcheckArgs),
    /// Train both renderers on a synthetic scene and compare them on held-out views.
    Bench(commands::BenchArgs),
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Done,
    PrintedConfig,
    CheckFailed,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => EXIT_CONFIG,
        "io" => EXIT_IO,
        "parse" => EXIT_PARSE,
        "invalid-input" => EXIT_INVALID_INPUT,
        _ => EXIT_NUMERIC,
    }
}

fn init_logging(level: &str) -> Result<()> {
    let filter: log::LevelFilter = level
        .parse()
        .map_err(|_| Error::Config(format!("unknown log level {level:?}")))?;
    env_logger::Builder::new()
        .filter_level(filter)
        .format(|buf, record| writeln!(buf, "level={} {}", record.level().as_str().to_lowercase(), record.args()))
        .target(env_logger::Target::Stderr)
        .try_init()
        .map_err(|e| Error::Config(format!("logger: {e}")))
}

fn init_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<Outcome> {
    let file = match &cli.global.config {
        Some(p) => ConfigFile::load(std::path::Path::new(p))?,
        None => ConfigFile::default(),
    };
    let mut r = Resolver::new(&file);
    let env_threads = match std::env::var("GDGS_THREADS") {
        Ok(s) => Some(
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("GDGS_THREADS: cannot parse {s:?}")))?,
        ),
        Err(_) => None,
    };
    let threads = r.get("threads", cli.global.threads.or(env_threads), 0usize)?;
    let log_level = r.get("log_level", cli.global.log_level.clone(), "info".to_string())?;
    let print_config = cli.global.print_config;
    let setup = move |r: &Resolver| -> Result<Option<Outcome>> {
        r.check_unknown()?;
        if print_config {
            print!("{}", r.to_toml());
            return Ok(Some(Outcome::PrintedConfig));
        }
        init_logging(&log_level)?;
        init_threads(threads)?;
        Ok(None)
    };
    match cli.command {
        Command::Init(a) => commands::init(a, &mut r, setup),
        Command::Train(a) => commands::train(a, &mut r, setup),
        Command::Render(a) => commands::render(a, &mut r, setup),
        Command::Solve(a) => commands::solve(a, &mut r, setup),
        Command::AnalyzeSparsity(a) => commands::analyze_sparsity(a, &mut r, setup),
        Command::Gradcheck(a) => commands::gradcheck(a, &mut r, setup),
        Command::Bench(a) => commands::bench(a, &mut r, setup),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done | Outcome::PrintedConfig) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error category={} message={msg:?}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
