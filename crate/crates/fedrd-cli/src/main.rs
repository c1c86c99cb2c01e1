//! `fedrd` command line: dataset generation, training runs, sweeps, and
//! budget/cost reports.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedrd_cli::config::{ConfigError, ExperimentConfig};
use fedrd_cli::csvio;
use fedrd_cli::experiment::{self, ExperimentError};

#[derive(Parser)]
#[command(
    name = "fedrd",
    version,
    about = "Privacy-preserving federated training simulator for relational financial data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `output.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps; 0 picks the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic transactions.csv and accounts.csv.
    Gen(CommonArgs),
    /// One training run from [train] and [privacy].
    Train(CommonArgs),
    /// The full sweep grid from [sweep].
    Sweep(CommonArgs),
    /// Print the privacy budget estimate only.
    Budget(CommonArgs),
    /// Print the closed-form communication costs only.
    Cost(CommonArgs),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.output.master_seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.output.threads = threads;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn classify(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn run(command: Command) -> Result<(), (u8, String)> {
    let args = match &command {
        Command::Gen(a)
        | Command::Train(a)
        | Command::Sweep(a)
        | Command::Budget(a)
        | Command::Cost(a) => a,
    };
    let cfg = load_config(args).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    let out_dir = cfg.output.dir.clone();

    match command {
        Command::Gen(_) => {
            if cfg.data.source != "generator" {
                return Err((
                    EXIT_CONFIG,
                    "gen needs data.source = \"generator\"".to_string(),
                ));
            }
            let generator = cfg.data.generator.clone().unwrap_or_default();
            let ds = fedrd_core::data::generate(&generator.to_gen_config())
                .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
            std::fs::create_dir_all(&out_dir).map_err(|e| {
                (
                    EXIT_RUNTIME,
                    format!("cannot create {}: {e}", out_dir.display()),
                )
            })?;
            let transactions = out_dir.join("transactions.csv");
            let accounts = out_dir.join("accounts.csv");
            csvio::write_dataset(&ds, &transactions, &accounts)
                .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
            println!("wrote {} and {}", transactions.display(), accounts.display());
            println!(
                "transactions={} accounts={} banks={} positives={} max_account_uses={}",
                ds.len(),
                ds.accounts().len(),
                ds.banks(),
                ds.positives(),
                ds.max_account_uses()
            );
            Ok(())
        }
        Command::Train(_) => {
            let plan = experiment::plan_single(&cfg, cfg.output.master_seed);
            let outcome = experiment::run_experiment(&cfg, &plan, &out_dir, cfg.output.threads)
                .map_err(|e| (classify(&e), e.to_string()))?;
            for row in &outcome.rows {
                println!(
                    "{} max_auprc={:.4} total_bits={}",
                    plan[0].label, row.max_auprc, row.total_bits
                );
            }
            println!("artifacts in {}", out_dir.display());
            Ok(())
        }
        Command::Sweep(_) => {
            let plan = experiment::plan_sweep(&cfg);
            println!("{} runs planned", plan.len());
            let outcome = experiment::run_experiment(&cfg, &plan, &out_dir, cfg.output.threads)
                .map_err(|e| (classify(&e), e.to_string()))?;
            for row in &outcome.rows {
                let epochs = row
                    .epochs_to_target
                    .map(|e| e.to_string())
                    .unwrap_or_else(|| experiment::UNREACHED_SENTINEL.to_string());
                println!(
                    "approach={} beta={} seed={} max_auprc={:.4} epochs_to_target={} total_bits={}",
                    row.approach, row.beta, row.seed, row.max_auprc, epochs, row.total_bits
                );
            }
            println!("artifacts in {}", out_dir.display());
            Ok(())
        }
        Command::Budget(_) => {
            let text = experiment::budget_text(&cfg).map_err(|e| (classify(&e), e.to_string()))?;
            print!("{text}");
            Ok(())
        }
        Command::Cost(_) => {
            let text = experiment::cost_text(&cfg).map_err(|e| (classify(&e), e.to_string()))?;
            print!("{text}");
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
