use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use openworld::kv;
use openworld_cli::{cmd_gen_data, cmd_roc, cmd_run, cmd_sweep_gamma, cmd_theorem, load_config, CliError};

/// Open-world prompt tuning experiments on a synthetic vision-language model.
///
/// Outputs go to `run.output_dir` from the config, or to $OWPT_OUTPUT_DIR when set.
#[derive(Parser)]
#[command(name = "owpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured method and seed.
    Run { config: PathBuf },
    /// Measure the cross-entropy bound constants per seed.
    Theorem { config: PathBuf },
    /// Retrain DeCoOp for several entropy margins.
    SweepGamma {
        config: PathBuf,
        /// Comma-separated margins; defaults to `sweep.gammas`.
        #[arg(long)]
        gammas: Option<String>,
    },
    /// Export ROC curves of the base-vs-new scores.
    Roc { config: PathBuf },
    /// Write the synthetic datasets without training.
    GenData { config: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let manifest = cmd_run(&cfg)?;
            println!("run {} -> {}", manifest.run_id, cfg.output_dir.display());
            println!("{:<11} {:>17} {:>17}", "method", "acc_overall", "auroc");
            for &m in &cfg.methods {
                let cell = |metric: &str| {
                    manifest
                        .summary_of(m, metric)
                        .map(|r| format!("{:.4} ± {:.4}", r.mean, r.std))
                        .unwrap_or_default()
                };
                println!("{:<11} {:>17} {:>17}", m, cell("acc_overall"), cell("auroc"));
            }
        }
        Command::Theorem { config } => {
            let cfg = load_config(&config)?;
            let result = cmd_theorem(&cfg);
            println!("bound reports in {}", cfg.output_dir.display());
            for r in result? {
                println!("lhs_zs {:.5} <= {:.5}, lhs_dept {:.5} <= {:.5}", r.lhs_zs, r.rhs_zs, r.lhs_dept, r.rhs_dept);
            }
        }
        Command::SweepGamma { config, gammas } => {
            let cfg = load_config(&config)?;
            let gammas = match gammas {
                Some(raw) => kv::split(&raw).ok_or_else(|| CliError::Config {
                    key: "--gammas".into(),
                    message: format!("cannot parse {raw:?}"),
                })?,
                None => cfg.gammas.clone(),
            };
            for (gamma, seed, report) in cmd_sweep_gamma(&cfg, &gammas)? {
                println!("gamma {gamma} seed {seed} acc_overall {:.4}", report.acc_overall);
            }
        }
        Command::Roc { config } => {
            let cfg = load_config(&config)?;
            for (seed, method, auroc) in cmd_roc(&cfg)? {
                println!("seed {seed} {:<7} auroc {auroc:.4}", method.as_str());
            }
        }
        Command::GenData { config } => {
            let cfg = load_config(&config)?;
            for path in cmd_gen_data(&cfg)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("owpt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
