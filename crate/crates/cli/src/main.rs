use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maskforge_cli::artifacts::{parse_shape, transfer_cost_report, FinalMasks};
use maskforge_cli::error::{CliError, Result};
use maskforge_cli::report::recompute_report;
use maskforge_cli::runner::{run_experiment, Overrides};

#[derive(Parser)]
#[command(name = "maskforge", version, about = "Joint training of networks and input-selection masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (grid point, run) job of a TOML config.
    Run {
        config: PathBuf,
        /// Override `base_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of jobs trained in parallel.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Recompute report.json of an output directory.
    Report { out_dir: PathBuf },
    /// Estimate per-image transfer cost of a final-mask file.
    Cost {
        masks: PathBuf,
        /// Input shape as WxHxC.
        shape: String,
        #[arg(long, default_value_t = 1)]
        bytes_per_value: usize,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::json("<stdout>", e))?;
    println!("{text}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out, jobs } => {
            let report = run_experiment(&config, &Overrides { seed, out, jobs })?;
            for g in &report.grid {
                let fmt = |s: Option<maskforge_cli::report::Stat>| match s {
                    Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std.unwrap_or(0.0)),
                    None => "n/a".to_string(),
                };
                eprintln!(
                    "grid {} (λ_init {}, λ_fac {}): {} done, {} failed, test acc {}, Q {}",
                    g.grid_point,
                    g.lambda_init,
                    g.lambda_fac,
                    g.completed,
                    g.failed,
                    fmt(g.test_accuracy),
                    fmt(g.mask_loss)
                );
            }
            for f in &report.failures {
                eprintln!("run {} failed: {}", f.job.run_id, f.error);
            }
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::Failed(report.failures.len()))
            }
        }
        Command::Report { out_dir } => print_json(&recompute_report(&out_dir)?),
        Command::Cost { masks, shape, bytes_per_value } => {
            let file = FinalMasks::load(&masks)?;
            let shape = parse_shape(&shape)?;
            let report = transfer_cost_report(&file.masks, shape, file.qualities.as_deref(), bytes_per_value)
                .map_err(|e| e.in_file(&masks))?;
            print_json(&report)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
