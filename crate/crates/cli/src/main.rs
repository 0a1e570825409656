//! `rna`: prepare data, train, evaluate, sweep and compare runs.

mod config;
mod dataset;
mod report;
mod run;
mod svg;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use log::info;

use config::{ConfigError, ExperimentConfig};
use run::{execute, Action, RunDir};

#[derive(Parser)]
#[command(name = "rna", version, about = "Long-tailed OOD detection with representation norm amplification")]
struct Cli {
    /// Parent directory for run directories; overrides `output_dir` in the config.
    #[arg(long, global = true, env = "RNA_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    /// Compute device. Only the CPU backend exists.
    #[arg(long, global = true, env = "RNA_DEVICE", default_value = "cpu", value_parser = ["cpu"])]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset splits and write the data manifest.
    PrepareData {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train, resuming an interrupted run with the same config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Replace a finished run or a run with a different config.
        #[arg(long)]
        force: bool,
    },
    /// Score the final checkpoint and write metrics.
    Evaluate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Prepare, train and evaluate.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// One full run per value of one config axis.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: sweep::Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Compare evaluated runs: tables, norm histograms, training dynamics.
    Report {
        /// Evaluated run directories.
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn output_root(cli_root: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli_root
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
        .map_err(|e| anyhow::Error::new(e).context(format!("invalid config {}", path.display())))
}

fn main_inner(cli: Cli) -> Result<bool> {
    let single = |config: &PathBuf, action: Action, force: bool| -> Result<bool> {
        let cfg = load(config)?;
        let dir = RunDir::new(output_root(&cli.output_root, &cfg).join(&cfg.run_id));
        if let Some(report) = execute(&cfg, &dir, action, force)? {
            print!("{}", report.to_text_table());
        }
        info!("run directory: {}", dir.root.display());
        Ok(true)
    };
    match &cli.command {
        Command::PrepareData { config, force } => single(config, Action::Prepare, *force),
        Command::Train { config, force } => single(config, Action::Train, *force),
        Command::Evaluate { config } => single(config, Action::Evaluate, false),
        Command::Run { config, force } => single(config, Action::Full, *force),
        Command::Sweep {
            config,
            axis,
            values,
            force,
        } => {
            let cfg = load(config)?;
            let root = output_root(&cli.output_root, &cfg);
            let points = sweep::sweep(&cfg, *axis, values, &root, *force)?;
            let out = root.join(format!("{}-sweep-{}", cfg.run_id, axis.name()));
            sweep::write_sweep(&points, *axis, &out)?;
            print!("{}", std::fs::read_to_string(out.join("sweep.txt"))?);
            let failed = points.iter().filter(|p| p.outcome.is_err()).count();
            if failed > 0 {
                eprintln!("error: {failed} of {} sweep values failed; see {}", points.len(), out.display());
            }
            Ok(failed == 0)
        }
        Command::Report { runs, out } => {
            let arts = runs
                .iter()
                .map(|d| report::RunArtifacts::load(d))
                .collect::<Result<Vec<_>>>()?;
            let files = report::write_report(&arts, out)?;
            print!("{}", std::fs::read_to_string(out.join("comparison.txt"))?);
            info!("wrote {} files to {}", files.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
