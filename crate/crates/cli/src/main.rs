use std::path::PathBuf;

use clap::{Parser, Subcommand};
use patchcast::data::Granularity;

use patchcast_cli::commands::{self, DefaultsSection, EvaluateFlags, Suite};

#[derive(Parser)]
#[command(name = "patchcast", version, about = "Patched decoder-only time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a corpus described by a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the environment and the config).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Forecast every record of a JSONL file.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Output JSONL path; defaults to forecasts.jsonl in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rolling test-period evaluation against naive baselines.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV file with id,timestamp,value columns.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_granularity)]
        granularity: Option<Granularity>,
        #[arg(long)]
        log_transform: bool,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Season length for the seasonal-naive baseline.
        #[arg(long)]
        season: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Context, input-patch and output-patch ablation tables.
    Ablate {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print a default configuration.
    Defaults {
        #[arg(value_enum, default_value = "pretrain")]
        section: DefaultsSection,
    },
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    s.parse().map_err(|e: patchcast::data::DataError| e.to_string())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Pretrain { config, output } => commands::pretrain(&config, output.as_deref()),
        Command::Forecast {
            checkpoint,
            input,
            horizon,
            output,
        } => commands::forecast(&checkpoint, &input, horizon, output.as_deref()),
        Command::Evaluate {
            checkpoint,
            config,
            data,
            granularity,
            log_transform,
            context,
            horizon,
            stride,
            season,
            output,
        } => commands::evaluate(EvaluateFlags {
            checkpoint,
            config,
            data,
            granularity,
            log_transform,
            context,
            horizon,
            stride,
            season,
            output,
        }),
        Command::Ablate { suite, config, output } => commands::ablate(suite, &config, output.as_deref()),
        Command::Defaults { section } => {
            print!("{}", commands::defaults(section)?);
            Ok(())
        }
    }
}
