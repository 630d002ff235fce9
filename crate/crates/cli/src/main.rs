use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qcore::harness::Mode;
use qcore::quant::QuantLevels;
use qcore_cli::commands::{self, PmfSource};
use qcore_cli::config::{parse_levels, CliConfig};
use qcore_cli::{CliError, Result};

/// Quantization-aware coresets and bit-flip calibration.
#[derive(Parser, Debug)]
#[command(name = "qcore", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated bit widths, e.g. 2,4,8.
    #[arg(long, value_parser = parse_levels)]
    levels: Option<QuantLevels>,
    /// Coreset size budget.
    #[arg(long)]
    budget: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the full-precision model and export miss counts.
    Train(Common),
    /// Sample the coreset from a miss table and report its information loss.
    Qcore {
        #[command(flatten)]
        common: Common,
        /// Miss table; `<out>/misses.csv` when absent.
        #[arg(long)]
        misses: Option<PathBuf>,
    },
    /// Quantize the trained model at every level.
    Quantize(Common),
    /// Record calibration deltas and train the bit-flipping networks.
    BfTrain(Common),
    /// Calibrate on the target stream and write the accuracy report.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full", value_parser = parse_mode)]
        mode: Mode,
        /// Run every stage from scratch for every seed.
        #[arg(long)]
        end_to_end: bool,
    },
    /// Compare coreset strategies on the source domain.
    CompareSubsets(Common),
    /// Run the stream under every mode.
    Ablate(Common),
    /// Information loss of a miss distribution at a sampling fraction.
    Infoloss {
        #[command(flatten)]
        common: Common,
        /// Miss table whose summed distribution is used.
        #[arg(long, conflicts_with = "pmf", required_unless_present = "pmf")]
        misses: Option<PathBuf>,
        /// Inline distribution as k:N pairs, e.g. 1:2,2:3,3:9.
        #[arg(long)]
        pmf: Option<String>,
        /// Sampling fraction; budget over population when absent.
        #[arg(long)]
        lambda: Option<f64>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: qcore::Error| e.to_string())
}

fn load(common: &Common) -> Result<CliConfig> {
    let mut cfg = match &common.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let exp = &mut cfg.experiment;
    if let Some(seed) = common.seed {
        exp.seeds = vec![seed];
    }
    if let Some(levels) = &common.levels {
        exp.levels = levels.clone();
    }
    if let Some(budget) = common.budget {
        exp.core_budget = budget;
    }
    if let Some(out) = &common.out {
        cfg.paths.out = out.clone();
    }
    if common.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    Ok(cfg)
}

fn init_logging(cfg: &CliConfig) {
    let default = cfg.log.as_deref().unwrap_or("warn");
    let env = env_logger::Env::new().filter_or("QCORE_LOG", default);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn run(cli: Cli) -> Result<String> {
    let common = match &cli.command {
        Command::Train(c)
        | Command::Quantize(c)
        | Command::BfTrain(c)
        | Command::CompareSubsets(c)
        | Command::Ablate(c) => c,
        Command::Qcore { common, .. } | Command::Stream { common, .. } | Command::Infoloss { common, .. } => common,
    };
    let cfg = load(common)?;
    init_logging(&cfg);
    let workers = common.workers;
    if !matches!(cli.command, Command::Qcore { .. } | Command::Infoloss { .. }) {
        for w in cfg.experiment.validate()? {
            log::warn!("{w}");
        }
    }
    match cli.command {
        Command::Train(_) => commands::train(&cfg),
        Command::Qcore { misses, .. } => commands::qcore(&cfg, misses.as_deref()),
        Command::Quantize(_) => commands::quantize(&cfg),
        Command::BfTrain(_) => commands::bf_train(&cfg),
        Command::Stream { mode, end_to_end, .. } => commands::stream(&cfg, mode, end_to_end, workers),
        Command::CompareSubsets(_) => commands::compare_subsets(&cfg, workers),
        Command::Ablate(_) => commands::ablate(&cfg, workers),
        Command::Infoloss {
            misses, pmf, lambda, ..
        } => {
            let source = match (misses, pmf) {
                (Some(path), _) => PmfSource::Misses(path),
                (None, Some(s)) => PmfSource::Inline(s),
                (None, None) => return Err(CliError::Usage("give --misses or --pmf".into())),
            };
            commands::infoloss(&cfg, source, lambda)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
