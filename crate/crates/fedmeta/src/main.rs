//! Command-line front end: run one experiment, compare methods on a
//! shared dataset, or generate a synthetic dataset file.
//!
//! Exit codes: 0 on success, 1 for configuration problems, 2 for
//! runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmeta::config::ExperimentConfig;
use fedmeta::metalearn::Method;
use fedmeta::runner;

#[derive(Parser)]
#[command(name = "fedmeta", version, about = "Deterministic federated meta-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metric stream and summary.
    Run {
        /// TOML experiment config.
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several methods on the identical dataset and client schedule.
    Compare {
        /// TOML experiment config; its method block fills in anything
        /// the compared methods share.
        config: PathBuf,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the configured synthetic dataset and write it as a
    /// per-user JSON file.
    GenData {
        /// TOML experiment config.
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; only real usage
            // mistakes are failures
            let failed = e.use_stderr();
            let _ = e.print();
            return if failed { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> fedmeta::Result<()> {
    match cli.command {
        Command::Run { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.federated.master_seed = s;
            }
            let artifacts = runner::run(&cfg)?;
            print_summary(&artifacts.summary);
            for path in &artifacts.written {
                println!("wrote {}", path.display());
            }
        }
        Command::Compare {
            config,
            methods,
            seed,
        } => {
            let text = read_config_text(&config)?;
            let mut configs = Vec::new();
            for method in methods {
                let mut cfg = ExperimentConfig::parse_for_method(&text, method)?;
                if let Some(s) = seed {
                    cfg.federated.master_seed = s;
                }
                configs.push(cfg);
            }
            let artifacts = runner::compare(&configs)?;
            for summary in &artifacts.summary.runs {
                print_summary(summary);
            }
            for path in artifacts
                .runs
                .iter()
                .flat_map(|r| &r.written)
                .chain(&artifacts.written)
            {
                println!("wrote {}", path.display());
            }
        }
        Command::GenData { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.federated.master_seed = s;
            }
            let (path, stats) = runner::gen_data(&cfg)?;
            println!(
                "wrote {} ({} clients, {} records, {} classes, feature dim {})",
                path.display(),
                stats.clients,
                stats.records,
                stats.classes,
                stats.feature_dim
            );
        }
    }
    Ok(())
}

// An unreadable config file is a configuration problem, not a runtime
// failure; rewrap so the exit code says so.
fn read_config_text(path: &Path) -> fedmeta::Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        fedmeta::Error::Config(format!("cannot read config {}: {e}", path.display()))
    })
}

fn load_config(path: &Path) -> fedmeta::Result<ExperimentConfig> {
    ExperimentConfig::parse(&read_config_text(path)?)
}

fn print_summary(summary: &runner::RunSummary) {
    let target = match &summary.target_hit {
        Some(hit) => format!("reached {} at round {}", summary.target_accuracy, hit.round),
        None => format!("never reached {}", summary.target_accuracy),
    };
    println!(
        "{}: test accuracy {:.4} after {} rounds, {} flops, {} bytes up, {target}",
        summary.method,
        summary.final_test_accuracy,
        summary.rounds,
        summary.total_cost.flops,
        summary.total_cost.uplink_bytes,
    );
}
