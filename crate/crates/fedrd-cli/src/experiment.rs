//! Batch experiment runner: dataset preparation, training runs, sweep
//! grids, artifact files, and the aggregate summary.
//!
//! Per run the runner writes `<label>_report.csv` (one row per epoch) and
//! `<label>_summary.txt` (privacy report, cost reconciliation, config
//! echo); one `summary.csv` aggregates all runs. Files are written to a
//! temp sibling and renamed, and all outputs are deterministic for a fixed
//! config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use fedrd_core::accountant::BudgetInputs;
use fedrd_core::comms::{closed_form, reconcile, render_reconcile, ClosedFormInputs};
use fedrd_core::data::{feature_stats, standardize, RelationalDataset};
use fedrd_core::fedrd::{run_training, FedError, TrainMode, TrainingReport};
use fedrd_core::nn::ModelSpec;

use crate::config::{parse_mode, ConfigError, ExperimentConfig};
use crate::csvio::{self, CsvError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("data error: {0}")]
    Data(#[from] fedrd_core::data::DataError),
    #[error("model error: {0}")]
    Model(#[from] fedrd_core::nn::NnError),
    #[error("accountant error: {0}")]
    Accountant(#[from] fedrd_core::accountant::AccountantError),
    #[error("run {label} failed: {source}")]
    Run { label: String, source: FedError },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One point of the experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub label: String,
    pub mode: TrainMode,
    /// PBM slope override for swept points; `None` uses `[privacy]` as-is.
    pub beta: Option<f64>,
    pub seed: u64,
}

fn run_label(mode: TrainMode, beta: Option<f64>, seed: u64) -> String {
    match beta {
        Some(beta) => format!("{mode}_b{beta}_s{seed}"),
        None => format!("{mode}_s{seed}"),
    }
}

/// Sweep grid: approaches x betas x seeds, plus a no-privacy run per
/// approach arity when enabled.
pub fn plan_sweep(cfg: &ExperimentConfig) -> Vec<PlannedRun> {
    let mut runs = Vec::new();
    for approach in &cfg.sweep.approaches {
        let mode = parse_mode(approach, "sum").expect("validated");
        for &beta in &cfg.sweep.betas {
            for &seed in &cfg.sweep.seeds {
                runs.push(PlannedRun {
                    label: run_label(mode, Some(beta), seed),
                    mode,
                    beta: Some(beta),
                    seed,
                });
            }
        }
    }
    if cfg.sweep.include_no_privacy {
        for approach in &cfg.sweep.approaches {
            let arity = match approach.as_str() {
                "concatenation" => "concat",
                _ => "sum",
            };
            let mode = parse_mode("none", arity).expect("validated");
            for &seed in &cfg.sweep.seeds {
                runs.push(PlannedRun {
                    label: run_label(mode, None, seed),
                    mode,
                    beta: None,
                    seed,
                });
            }
        }
    }
    runs
}

/// Single run from `[train]` and `[privacy]`.
pub fn plan_single(cfg: &ExperimentConfig, seed: u64) -> Vec<PlannedRun> {
    let mode = cfg.train_mode();
    let beta = mode.is_private().then_some(cfg.privacy.fwd_beta);
    vec![PlannedRun {
        label: run_label(mode, beta, seed),
        mode,
        beta,
        seed,
    }]
}

/// Loads or generates the dataset, splits it, and standardizes both sides
/// with training-split statistics.
pub fn prepare_data(
    cfg: &ExperimentConfig,
) -> Result<(RelationalDataset, RelationalDataset), ExperimentError> {
    let full = match cfg.data.source.as_str() {
        "generator" => {
            let generator = cfg.data.generator.clone().unwrap_or_default();
            fedrd_core::data::generate(&generator.to_gen_config())?
        }
        _ => csvio::load_dataset(
            cfg.data.transactions_csv.as_ref().expect("validated"),
            cfg.data.accounts_csv.as_ref().expect("validated"),
        )?,
    };
    let (mut train, mut test) = full.split(
        cfg.split.test_fraction,
        cfg.split.stratified,
        cfg.output.master_seed,
    )?;
    let stats = feature_stats(&train);
    standardize(&mut train, &stats);
    standardize(&mut test, &stats);
    Ok((train, test))
}

/// One finished run with its rendered artifacts.
pub struct CompletedRun {
    pub run: PlannedRun,
    pub report: TrainingReport,
    pub report_csv: String,
    pub summary_txt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub approach: String,
    pub beta: String,
    pub seed: u64,
    pub max_auprc: f64,
    pub epochs_to_target: Option<u64>,
    pub total_bits: u64,
}

impl SummaryRow {
    fn to_csv_line(&self) -> String {
        let epochs = match self.epochs_to_target {
            Some(e) => e.to_string(),
            None => UNREACHED_SENTINEL.to_string(),
        };
        format!(
            "{},{},{},{:.6},{},{}",
            self.approach, self.beta, self.seed, self.max_auprc, epochs, self.total_bits
        )
    }
}

/// Value written in `epochs_to_target` when the target was never reached.
pub const UNREACHED_SENTINEL: &str = "-";

pub const SUMMARY_HEADER: &str = "approach,beta,seed,max_auprc,epochs_to_target,total_bits";

fn render_report_csv(report: &TrainingReport) -> String {
    let mut out = String::from("epoch,loss,auprc,bits_forward,bits_backward,bits_bankagg\n");
    for (i, loss) in report.train_loss.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{},{}",
            i + 1,
            loss,
            report.test_auprc[i],
            report.bits_forward[i],
            report.bits_backward[i],
            report.bits_bankagg[i]
        );
    }
    out
}

fn render_summary_txt(
    cfg: &ExperimentConfig,
    run: &PlannedRun,
    report: &TrainingReport,
    row: &SummaryRow,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# run");
    let _ = writeln!(out, "label={}", run.label);
    let _ = writeln!(out, "approach={}", row.approach);
    let _ = writeln!(out, "beta={}", row.beta);
    let _ = writeln!(out, "seed={}", row.seed);
    let _ = writeln!(out, "iterations={}", report.iterations);
    let _ = writeln!(out, "initial_auprc={:.6}", report.initial_auprc);
    let _ = writeln!(out, "max_auprc={:.6}", row.max_auprc);
    let _ = writeln!(
        out,
        "epochs_to_target={}",
        row.epochs_to_target
            .map(|e| e.to_string())
            .unwrap_or_else(|| UNREACHED_SENTINEL.to_string())
    );
    let _ = writeln!(out, "target_auprc={}", cfg.report.target_auprc);
    let _ = writeln!(out, "total_bits={}", row.total_bits);
    let _ = writeln!(out, "wall_clock_secs={:.3}", report.wall_clock_secs);

    let _ = writeln!(out, "\n# privacy");
    match &report.privacy {
        Some(privacy) => {
            out.push_str(&privacy.render_text());
            let _ = writeln!(out, "\n# privacy rows");
            out.push_str(&privacy.render_csv());
        }
        None => {
            let _ = writeln!(out, "none (no-privacy ablation)");
        }
    }

    let _ = writeln!(out, "\n# cost reconciliation");
    match report.closed_form_inputs() {
        Some(inputs) => {
            let costs = closed_form(&inputs);
            let rows = reconcile(&report.ledger, &costs);
            out.push_str(&render_reconcile(&rows));
        }
        None => {
            let _ = writeln!(out, "n/a (closed forms cover the private approaches)");
        }
    }

    let _ = writeln!(out, "\n# config echo (toml)");
    out.push_str(&cfg.to_toml_string());
    out
}

fn execute_run(
    cfg: &ExperimentConfig,
    run: &PlannedRun,
    train: &RelationalDataset,
    test: &RelationalDataset,
) -> Result<CompletedRun, ExperimentError> {
    let train_cfg = cfg.train_config(run.mode, run.beta, run.seed);
    let started = Instant::now();
    let mut report =
        run_training(&train_cfg, train, test).map_err(|source| ExperimentError::Run {
            label: run.label.clone(),
            source,
        })?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();

    let row = SummaryRow {
        approach: run.mode.to_string(),
        beta: run
            .beta
            .map(|b| b.to_string())
            .unwrap_or_else(|| "none".to_string()),
        seed: run.seed,
        max_auprc: report.max_auprc(),
        epochs_to_target: report.epochs_to_target(cfg.report.target_auprc),
        total_bits: report.ledger.grand_total(),
    };
    let report_csv = render_report_csv(&report);
    let summary_txt = render_summary_txt(cfg, run, &report, &row);
    Ok(CompletedRun {
        run: run.clone(),
        report,
        report_csv,
        summary_txt,
    })
}

pub fn summary_row_of(cfg: &ExperimentConfig, completed: &CompletedRun) -> SummaryRow {
    SummaryRow {
        approach: completed.run.mode.to_string(),
        beta: completed
            .run
            .beta
            .map(|b| b.to_string())
            .unwrap_or_else(|| "none".to_string()),
        seed: completed.run.seed,
        max_auprc: completed.report.max_auprc(),
        epochs_to_target: completed
            .report
            .epochs_to_target(cfg.report.target_auprc),
        total_bits: completed.report.ledger.grand_total(),
    }
}

/// Writes `contents` through a temp sibling and an atomic rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|source| ExperimentError::Write {
        path: tmp.clone(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| ExperimentError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Everything `run_experiment` produced, for callers and tests.
pub struct ExperimentOutcome {
    pub rows: Vec<SummaryRow>,
    pub completed: Vec<CompletedRun>,
    pub files: Vec<PathBuf>,
}

/// Runs every planned point (optionally across threads), writes per-run
/// artifacts plus `summary.csv`, and returns the outcome. On a failed run,
/// partial artifacts stay on disk next to an `error_manifest.txt`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    plan: &[PlannedRun],
    out_dir: &Path,
    threads: usize,
) -> Result<ExperimentOutcome, ExperimentError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ExperimentError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let (train, test) = prepare_data(cfg)?;

    let workers = if threads == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        threads
    }
    .min(plan.len().max(1));

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CompletedRun, ExperimentError>>>> =
        Mutex::new((0..plan.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= plan.len() {
                    break;
                }
                let result = execute_run(cfg, &plan[index], &train, &test);
                slots.lock().unwrap()[index] = Some(result);
            });
        }
    });

    let results = slots.into_inner().unwrap();
    let mut completed = Vec::with_capacity(plan.len());
    let mut failures: Vec<String> = Vec::new();
    for result in results {
        match result.expect("every slot filled") {
            Ok(run) => completed.push(run),
            Err(e) => failures.push(e.to_string()),
        }
    }

    let mut files = Vec::new();
    let mut rows = Vec::with_capacity(completed.len());
    for run in &completed {
        let report_path = out_dir.join(format!("{}_report.csv", run.run.label));
        write_atomic(&report_path, &run.report_csv)?;
        files.push(report_path);
        let summary_path = out_dir.join(format!("{}_summary.txt", run.run.label));
        write_atomic(&summary_path, &run.summary_txt)?;
        files.push(summary_path);
        if run.report.message_log.enabled() {
            let audit_path = out_dir.join(format!("{}_messages.log", run.run.label));
            write_atomic(&audit_path, &run.report.message_log.render_lines())?;
            files.push(audit_path);
        }
        rows.push(summary_row_of(cfg, run));
    }

    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for row in &rows {
        summary.push_str(&row.to_csv_line());
        summary.push('\n');
    }
    let summary_path = out_dir.join("summary.csv");
    write_atomic(&summary_path, &summary)?;
    files.push(summary_path);

    if !failures.is_empty() {
        let manifest_path = out_dir.join("error_manifest.txt");
        write_atomic(&manifest_path, &(failures.join("\n") + "\n"))?;
        return Err(ExperimentError::Run {
            label: format!("{} of {} runs", failures.len(), plan.len()),
            source: FedError::InvalidConfig(failures.join("; ")),
        });
    }

    Ok(ExperimentOutcome {
        rows,
        completed,
        files,
    })
}

/// Budget estimates for both approaches on the configured data and model.
pub fn budget_text(cfg: &ExperimentConfig) -> Result<String, ExperimentError> {
    let (train, _) = prepare_data(cfg)?;
    let account_spec = ModelSpec::embedding(
        train.account_dim(),
        &cfg.model.account_hidden,
        cfg.model.embedding_dim,
    )?;
    let iterations = cfg.train.epochs
        * fedrd_core::data::EpochSampler::batches_per_epoch(train.len(), cfg.train.batch_size);
    let sample_cfg = cfg.train_config(TrainMode::Summation, None, cfg.output.master_seed);

    let mut out = String::new();
    let _ = writeln!(out, "dataset_size={}", train.len());
    let _ = writeln!(out, "max_account_uses={}", train.max_account_uses());
    let _ = writeln!(out, "account_params={}", account_spec.param_count());
    let _ = writeln!(out, "iterations={iterations}");
    for approach in [
        fedrd_core::accountant::Approach::Concatenation,
        fedrd_core::accountant::Approach::Summation,
    ] {
        let inputs = BudgetInputs {
            approach,
            iterations: iterations.max(1),
            dataset_size: train.len() as u64,
            batch_size: cfg.train.batch_size as u64,
            embedding_dim: cfg.model.embedding_dim as u64,
            max_account_uses: train.max_account_uses().max(1) as u64,
            banks: train.banks() as u64,
            account_params: account_spec.param_count() as u64,
            alphas: cfg.report.alphas.clone(),
            sigma2: sample_cfg.privacy.effective_sigma2(),
            fwd_bins: cfg.privacy.fwd_bins,
            fwd_slope: cfg.privacy.fwd_beta,
            bank_bins: cfg.privacy.bank_bins,
            bank_slope: cfg.privacy.bank_beta,
            pbm_constant: cfg.report.pbm_constant,
        };
        let report = fedrd_core::accountant::budget_report(&inputs)?;
        out.push('\n');
        out.push_str(&report.render_text());
    }
    Ok(out)
}

/// Closed-form communication costs for both approaches.
pub fn cost_text(cfg: &ExperimentConfig) -> Result<String, ExperimentError> {
    let (train, _) = prepare_data(cfg)?;
    let account_spec = ModelSpec::embedding(
        train.account_dim(),
        &cfg.model.account_hidden,
        cfg.model.embedding_dim,
    )?;
    let iterations = cfg.train.epochs
        * fedrd_core::data::EpochSampler::batches_per_epoch(train.len(), cfg.train.batch_size);

    let mut out = String::new();
    let _ = writeln!(out, "iterations={iterations}");
    let _ = writeln!(out, "account_params={}", account_spec.param_count());
    for approach in [
        fedrd_core::accountant::Approach::Concatenation,
        fedrd_core::accountant::Approach::Summation,
    ] {
        let costs = closed_form(&ClosedFormInputs {
            approach,
            iterations,
            batch_size: cfg.train.batch_size as u64,
            embedding_dim: cfg.model.embedding_dim as u64,
            float_bits: cfg.report.float_bits,
            fwd_bins: cfg.privacy.fwd_bins,
            bank_bins: cfg.privacy.bank_bins,
            banks: train.banks() as u64,
            account_params: account_spec.param_count() as u64,
        });
        let _ = writeln!(out, "\napproach={approach}");
        let _ = writeln!(out, "forward_backward_bits={:.3}", costs.forward_backward);
        let _ = writeln!(out, "bank_averaging_bits={:.3}", costs.bank_averaging);
        let _ = writeln!(out, "total_bits={:.3}", costs.total());
        let _ = writeln!(out, "total_gigabytes={:.9}", costs.total() / 8.0 / 1e9);
    }
    Ok(out)
}
