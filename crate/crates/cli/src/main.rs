use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use star_kit::Point;
use star_kit_cli::{
    cmd_decode, cmd_experiment, cmd_gradcheck, cmd_loss, cmd_metrics, cmd_simulate,
    configure_threads, CliError, ExperimentKind, Output, RunConfig,
};

#[derive(Parser)]
#[command(name = "star-kit", version, about = "Ambiguity-guided heatmap losses, moments and landmark metrics")]
struct Cli {
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mean, covariance and principal axes of a heatmap CSV.
    Decode { heatmap: PathBuf },
    /// Loss parts of a heatmap CSV against a target point.
    Loss {
        heatmap: PathBuf,
        #[arg(allow_negative_numbers = true)]
        target_x: f64,
        #[arg(allow_negative_numbers = true)]
        target_y: f64,
    },
    /// Compares analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Runs a synthetic experiment and writes its tables and summary.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// NME, failure rate, AUC and CED of predictions against ground truth.
    Metrics {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the synthetic train and test sets as CSV.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<Output, CliError> {
    configure_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Decode { heatmap } => cmd_decode(&heatmap),
        Command::Loss {
            heatmap,
            target_x,
            target_y,
        } => cmd_loss(&heatmap, Point::new(target_x, target_y), &cfg),
        Command::Gradcheck { seeds, tolerance } => cmd_gradcheck(&cfg, seeds, tolerance),
        Command::Experiment { kind, out } => cmd_experiment(kind, &cfg, &out),
        Command::Metrics { pred, gt, out } => cmd_metrics(&pred, &gt, &cfg, out.as_deref()),
        Command::Simulate { out } => cmd_simulate(&cfg, &out),
        Command::Config => Ok(Output {
            text: cfg.to_json(),
            passed: true,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{}", out.text);
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
