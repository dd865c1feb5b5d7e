mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use urwkv::Error;

use commands::ErfArgs;

#[derive(Parser)]
#[command(
    name = "urwkv",
    version,
    about = "Train, evaluate and analyze U-RWKV segmentation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ellipse dataset (images/, masks/, manifest.json).
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best/last checkpoints, history.csv and resolved-config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean Dice, IoU and HD95 of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the run config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run config whose validation split is evaluated.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective receptive field heatmap and high-contribution ratios.
    Erf {
        /// One checkpoint, or two for a side-by-side comparison.
        #[arg(long, num_args = 1)]
        checkpoint: Vec<PathBuf>,
        /// Run config to probe at initialization (requires --untrained).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Probe freshly initialized weights of the same architecture.
        #[arg(long)]
        untrained: bool,
        #[arg(long, value_delimiter = ',', default_values_t = urwkv::erf::DEFAULT_THRESHOLDS)]
        threshold_grid: Vec<f64>,
        #[arg(long, default_value_t = urwkv::erf::PROBE_COUNT)]
        probes: usize,
        #[arg(long, default_value_t = urwkv::erf::PROBE_SEED)]
        probe_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count and per-stage MAC estimate.
    Info {
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Train the twelve-row component ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train rows concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::MissingMask(_) | Error::Image(_) | Error::Io(_) => 3,
        Error::NumericalAbort { .. } => 4,
        _ => 1,
    }
}

fn init_threads() -> urwkv::Result<()> {
    let Ok(v) = std::env::var("URWKV_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "URWKV_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> urwkv::Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData {
            seed,
            count,
            size,
            out,
        } => commands::gen_data(seed, count, size, &out),
        Command::Train { config, out } => commands::train(&config, out.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => commands::eval(
            &checkpoint,
            data.as_deref(),
            config.as_deref(),
            out.as_deref(),
        )
        .map(drop),
        Command::Erf {
            checkpoint,
            config,
            untrained,
            threshold_grid,
            probes,
            probe_seed,
            out,
        } => commands::erf(&ErfArgs {
            checkpoints: &checkpoint,
            config: config.as_deref(),
            untrained,
            thresholds: &threshold_grid,
            probes,
            probe_seed,
            out: &out,
        }),
        Command::Info {
            config,
            checkpoint,
            json,
        } => {
            let info = commands::info(config.as_deref(), checkpoint.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&info)?);
            } else {
                print!("{}", commands::info_text(&info));
            }
            Ok(())
        }
        Command::Ablate {
            config,
            out,
            parallel,
        } => commands::ablate(&config, out.as_deref(), parallel).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
