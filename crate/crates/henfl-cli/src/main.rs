//! Command-line experiment runner.
//!
//! Subcommands map to the scenario grid: `prepare` runs the privacy
//! pipeline and fills the cache, `train` runs one cell, `grid` runs all
//! nine, `dump-samples` writes PGM images, and `leakage` prints the
//! one-shot privacy spend against the per-round composition baseline.
//!
//! Exit codes: 0 success, 2 configuration or usage, 3 file I/O,
//! 4 dataset format or cache, 5 training or protocol failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use henfl::config::{ExperimentConfig, Scenario};
use henfl::data::DataError;
use henfl::dp::cumulative_leakage;
use henfl::experiment::{
    cell_dir, dump_samples, prepare_cell, run_grid, run_scenario, ExperimentError,
};

/// Environment variable consulted for the default dataset directory.
const DATA_DIR_ENV: &str = "HENFL_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "henfl",
    about = "Federated-learning privacy testbed: block compression + one-shot Gaussian noise",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare and cache the privacy-preserving datasets for one cell.
    Prepare(CellArgs),
    /// Run one experiment cell end to end and write its reports.
    Train(CellArgs),
    /// Run the full nine-cell grid and write grid_summary.csv.
    Grid(CellArgs),
    /// Write sample images (pre-noise and noisy) for one cell.
    DumpSamples {
        #[command(flatten)]
        cell: CellArgs,
        /// Number of samples to dump.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Report one-shot leakage against the per-round composition baseline.
    Leakage {
        /// Privacy leakage per application.
        #[arg(long, default_value_t = 2.0)]
        epsilon: f64,
        /// Number of rounds the baseline would noise.
        #[arg(long, default_value_t = 10)]
        rounds: u64,
    },
}

#[derive(Args)]
struct CellArgs {
    /// Scenario: 1 (28x28, 100%), 2 (14x14, 25%), 3 (7x7, 6.25%).
    #[arg(long, default_value_t = 2)]
    scenario: u8,
    /// Privacy leakage epsilon.
    #[arg(long, default_value_t = 2.0)]
    epsilon: f64,
    /// Digit base p; defaults to 256 (scenarios 1, 2) or 16 (scenario 3).
    #[arg(long)]
    base: Option<u32>,
    /// Number of federated clients.
    #[arg(long, default_value_t = 4)]
    clients: usize,
    /// Synchronization rounds.
    #[arg(long, default_value_t = 10)]
    rounds: u32,
    /// Local epochs per round.
    #[arg(long, default_value_t = 1)]
    local_epochs: u32,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Master seed; every random choice derives from it.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory holding the four MNIST IDX files
    /// (falls back to $HENFL_DATA_DIR, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for reports, caches and samples.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Desk-scale mode: at most 8000 train / 2000 test images, 5 rounds.
    #[arg(long, default_value_t = false)]
    fast: bool,
}

impl CellArgs {
    fn into_config(self) -> Result<ExperimentConfig, String> {
        let scenario = Scenario::from_id(self.scenario).map_err(|e| e.to_string())?;
        let mut config = ExperimentConfig::new(scenario, self.epsilon);
        if let Some(base) = self.base {
            config.base = base;
        }
        config.clients = self.clients;
        config.rounds = self.rounds;
        config.local_epochs = self.local_epochs;
        config.batch_size = self.batch;
        config.learning_rate = self.lr;
        config.seed = self.seed;
        config.data_dir = self
            .data_dir
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"));
        config.out_dir = self.out;
        config.fast = self.fast;
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }

    fn base_override(&self) -> Option<u32> {
        self.base
    }
}

fn exit_code_for(error: &ExperimentError) -> u8 {
    match error {
        ExperimentError::Config(_) => 2,
        ExperimentError::Io { .. } => 3,
        ExperimentError::Data(DataError::Io { .. }) => 3,
        ExperimentError::Data(_) => 4,
        ExperimentError::Protocol(_) | ExperimentError::Model(_) => 5,
    }
}

fn run(command: Command) -> Result<(), (u8, String)> {
    let experiment_failure = |e: ExperimentError| (exit_code_for(&e), e.to_string());
    let config_failure = |message: String| (2u8, message);
    match command {
        Command::Prepare(args) => {
            let config = args.into_config().map_err(config_failure)?;
            let prepared = prepare_cell(&config).map_err(experiment_failure)?;
            let train_images: usize = prepared
                .clients
                .iter()
                .map(|c| c.private().map_or(0, |p| p.len()))
                .sum();
            let draws: u64 = prepared
                .clients
                .iter()
                .map(|c| c.private().map_or(0, |p| p.noise_draws()))
                .sum();
            println!(
                "prepared scenario {} eps {}: {} train images across {} clients, {} test images",
                config.scenario.id(),
                config.epsilon,
                train_images,
                config.clients,
                prepared.test.len()
            );
            println!(
                "element dimension {0}x{0}, data noise draws (train) {1}",
                config.compressed_side(),
                draws
            );
            println!("cache directory: {}", config.out_dir.join("cache").display());
            Ok(())
        }
        Command::Train(args) => {
            let config = args.into_config().map_err(config_failure)?;
            let report = run_scenario(&config).map_err(experiment_failure)?;
            println!(
                "scenario {} eps {}: dimension {2}x{2}, data size {3}%, sigma^2 {4}",
                report.scenario.id(),
                report.epsilon,
                report.dimension,
                report.data_size_pct,
                report.sigma_sq
            );
            for (round, accuracy) in report.accuracy_per_round.iter().enumerate() {
                println!("round {:>3}: test accuracy {:.4}", round + 1, accuracy);
            }
            println!(
                "final accuracy {:.4}; leakage {} (one-shot) vs {} (per-round baseline)",
                report.final_accuracy, report.leakage_one_shot, report.leakage_baseline
            );
            println!("reports in {}", cell_dir(&config).display());
            Ok(())
        }
        Command::Grid(args) => {
            let base_override = args.base_override();
            let config = args.into_config().map_err(config_failure)?;
            let reports = run_grid(&config, base_override).map_err(experiment_failure)?;
            println!("scenario  dim    size%   eps    sigma^2  accuracy");
            for report in &reports {
                println!(
                    "{:>8}  {:>2}x{:<2}  {:>5}   {:<5}  {:<7}  {:.4}",
                    report.scenario.id(),
                    report.dimension,
                    report.dimension,
                    report.data_size_pct,
                    report.epsilon,
                    format!("{:.4}", report.sigma_sq),
                    report.final_accuracy
                );
            }
            println!(
                "summary written to {}; per-round curves in {}",
                config.out_dir.join("grid_summary.csv").display(),
                config.out_dir.join("grid_accuracy.csv").display()
            );
            Ok(())
        }
        Command::DumpSamples { cell, count } => {
            let config = cell.into_config().map_err(config_failure)?;
            let written = dump_samples(&config, count).map_err(experiment_failure)?;
            println!("wrote {} sample files", written.len());
            for path in written {
                println!("  {}", path.display());
            }
            Ok(())
        }
        Command::Leakage { epsilon, rounds } => {
            if !(epsilon.is_finite() && epsilon > 0.0) {
                return Err((2, format!("epsilon must be positive, got {epsilon}")));
            }
            println!(
                "one-shot pipeline: leakage stays {} after any number of rounds",
                cumulative_leakage(epsilon, 1)
            );
            println!(
                "per-round baseline: {} rounds at eps {} compose to {}",
                rounds,
                epsilon,
                cumulative_leakage(epsilon, rounds)
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
