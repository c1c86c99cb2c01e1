//! Experiment configuration: a single TOML file covering data source,
//! model shape, training, privacy parameters, sweep grid, and outputs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fedrd_core::data::GenConfig;
use fedrd_core::fedrd::{FusionArity, PrivacyParams, TrainConfig, TrainMode};
use fedrd_core::nn::OptimizerKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// "generator" or "csv"; exactly one source is configured.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transactions_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accounts_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(default = "defaults::gen_transactions")]
    pub transactions: usize,
    #[serde(default = "defaults::gen_banks")]
    pub banks: usize,
    #[serde(default = "defaults::gen_accounts_per_bank")]
    pub accounts_per_bank: usize,
    #[serde(default = "defaults::gen_transaction_dim")]
    pub transaction_dim: usize,
    #[serde(default = "defaults::gen_account_dim")]
    pub account_dim: usize,
    #[serde(default = "defaults::gen_positive_rate")]
    pub positive_rate: f64,
    #[serde(default = "defaults::gen_transaction_signal")]
    pub transaction_signal: f64,
    #[serde(default = "defaults::gen_account_signal")]
    pub account_signal: f64,
    #[serde(default)]
    pub allow_same_bank: bool,
    #[serde(default = "defaults::gen_seed")]
    pub seed: u64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        toml::from_str("").expect("empty generator section has defaults")
    }
}

impl GeneratorSection {
    pub fn to_gen_config(&self) -> GenConfig {
        GenConfig {
            transactions: self.transactions,
            banks: self.banks,
            accounts_per_bank: self.accounts_per_bank,
            transaction_dim: self.transaction_dim,
            account_dim: self.account_dim,
            positive_rate: self.positive_rate,
            transaction_signal: self.transaction_signal,
            account_signal: self.account_signal,
            allow_same_bank: self.allow_same_bank,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "defaults::yes")]
    pub stratified: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_fraction: defaults::test_fraction(),
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "defaults::embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "defaults::embedding_hidden")]
    pub transaction_hidden: Vec<usize>,
    #[serde(default = "defaults::embedding_hidden")]
    pub account_hidden: Vec<usize>,
    #[serde(default = "defaults::fusion_hidden")]
    pub fusion_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embedding_dim: defaults::embedding_dim(),
            transaction_hidden: defaults::embedding_hidden(),
            account_hidden: defaults::embedding_hidden(),
            fusion_hidden: defaults::fusion_hidden(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// "concatenation", "summation", or "none" (no-privacy ablation).
    #[serde(default = "defaults::approach")]
    pub approach: String,
    /// Fusion arity for the no-privacy ablation: "concat" or "sum".
    #[serde(default = "defaults::fusion_arity")]
    pub fusion_arity: String,
    #[serde(default = "defaults::epochs")]
    pub epochs: u64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// "adam" or "sgd".
    #[serde(default = "defaults::optimizer")]
    pub optimizer: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("empty train section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    /// Gaussian variance; omitted or 0 derives 4 / (b beta^2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default = "defaults::fwd_bins")]
    pub fwd_bins: u32,
    #[serde(default = "defaults::beta")]
    pub fwd_beta: f64,
    #[serde(default = "defaults::bank_bins")]
    pub bank_bins: u32,
    #[serde(default = "defaults::beta")]
    pub bank_beta: f64,
    #[serde(default = "defaults::clip_bound")]
    pub clip_bound: f64,
}

impl Default for PrivacySection {
    fn default() -> Self {
        toml::from_str("").expect("empty privacy section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "defaults::sweep_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "defaults::sweep_approaches")]
    pub approaches: Vec<String>,
    #[serde(default = "defaults::sweep_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::yes")]
    pub include_no_privacy: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        toml::from_str("").expect("empty sweep section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "defaults::target_auprc")]
    pub target_auprc: f64,
    #[serde(default = "defaults::float_bits")]
    pub float_bits: u32,
    #[serde(default = "defaults::alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "defaults::pbm_constant")]
    pub pbm_constant: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        toml::from_str("").expect("empty report section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "defaults::out_dir")]
    pub dir: PathBuf,
    #[serde(default = "defaults::master_seed")]
    pub master_seed: u64,
    /// 0 lets the runner pick the available parallelism.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub audit_messages: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        toml::from_str("").expect("empty output section has defaults")
    }
}

mod defaults {
    use std::path::PathBuf;

    pub fn gen_transactions() -> usize {
        20_000
    }
    pub fn gen_banks() -> usize {
        4
    }
    pub fn gen_accounts_per_bank() -> usize {
        500
    }
    pub fn gen_transaction_dim() -> usize {
        8
    }
    pub fn gen_account_dim() -> usize {
        6
    }
    pub fn gen_positive_rate() -> f64 {
        0.01
    }
    pub fn gen_transaction_signal() -> f64 {
        1.0
    }
    pub fn gen_account_signal() -> f64 {
        1.5
    }
    pub fn gen_seed() -> u64 {
        7
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn yes() -> bool {
        true
    }
    pub fn embedding_dim() -> usize {
        64
    }
    pub fn embedding_hidden() -> Vec<usize> {
        vec![128, 64]
    }
    pub fn fusion_hidden() -> Vec<usize> {
        vec![32]
    }
    pub fn approach() -> String {
        "summation".into()
    }
    pub fn fusion_arity() -> String {
        "sum".into()
    }
    pub fn epochs() -> u64 {
        30
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn learning_rate() -> f64 {
        0.001
    }
    pub fn optimizer() -> String {
        "adam".into()
    }
    pub fn fwd_bins() -> u32 {
        64
    }
    pub fn bank_bins() -> u32 {
        1024
    }
    pub fn beta() -> f64 {
        0.25
    }
    pub fn clip_bound() -> f64 {
        1.0
    }
    pub fn sweep_betas() -> Vec<f64> {
        vec![0.10, 0.15, 0.25]
    }
    pub fn sweep_approaches() -> Vec<String> {
        vec!["concatenation".into(), "summation".into()]
    }
    pub fn sweep_seeds() -> Vec<u64> {
        vec![1]
    }
    pub fn target_auprc() -> f64 {
        0.7
    }
    pub fn float_bits() -> u32 {
        32
    }
    pub fn alphas() -> Vec<f64> {
        vec![1.5, 2.0]
    }
    pub fn pbm_constant() -> f64 {
        1.0
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
    pub fn master_seed() -> u64 {
        42
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues: Vec<String> = Vec::new();

        match self.data.source.as_str() {
            "generator" => {
                if self.data.transactions_csv.is_some() || self.data.accounts_csv.is_some() {
                    issues.push(
                        "data: source = \"generator\" must not set transactions_csv/accounts_csv"
                            .into(),
                    );
                }
                let generator = self.data.generator.clone().unwrap_or_default();
                if let Err(e) = generator.to_gen_config().validate() {
                    issues.push(format!("data.generator: {e}"));
                }
            }
            "csv" => {
                if self.data.generator.is_some() {
                    issues.push("data: source = \"csv\" must not set [data.generator]".into());
                }
                if self.data.transactions_csv.is_none() {
                    issues.push("data.transactions_csv: required when source = \"csv\"".into());
                }
                if self.data.accounts_csv.is_none() {
                    issues.push("data.accounts_csv: required when source = \"csv\"".into());
                }
            }
            other => issues.push(format!(
                "data.source: expected \"generator\" or \"csv\", got \"{other}\""
            )),
        }

        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            issues.push(format!(
                "split.test_fraction: must be in (0, 1), got {}",
                self.split.test_fraction
            ));
        }
        if self.model.embedding_dim == 0 {
            issues.push("model.embedding_dim: must be positive".into());
        }
        if parse_mode(&self.train.approach, &self.train.fusion_arity).is_none() {
            issues.push(format!(
                "train.approach/fusion_arity: unknown combination \"{}\"/\"{}\"",
                self.train.approach, self.train.fusion_arity
            ));
        }
        if parse_optimizer(&self.train.optimizer).is_none() {
            issues.push(format!(
                "train.optimizer: expected \"adam\" or \"sgd\", got \"{}\"",
                self.train.optimizer
            ));
        }
        if self.train.batch_size == 0 {
            issues.push("train.batch_size: must be positive".into());
        }
        if !(self.train.learning_rate > 0.0) {
            issues.push("train.learning_rate: must be positive".into());
        }
        for (name, beta) in [
            ("privacy.fwd_beta", self.privacy.fwd_beta),
            ("privacy.bank_beta", self.privacy.bank_beta),
        ] {
            if !(0.0..=0.25).contains(&beta) {
                issues.push(format!("{name}: must be in [0, 0.25], got {beta}"));
            }
        }
        if let Some(sigma2) = self.privacy.sigma2 {
            if !(sigma2 > 0.0) {
                issues.push(format!("privacy.sigma2: must be positive, got {sigma2}"));
            }
        }
        if self.sweep.betas.is_empty() {
            issues.push("sweep.betas: must not be empty".into());
        }
        for beta in &self.sweep.betas {
            if !(*beta > 0.0 && *beta <= 0.25) {
                issues.push(format!("sweep.betas: values must be in (0, 0.25], got {beta}"));
            }
        }
        if self.sweep.approaches.is_empty() {
            issues.push("sweep.approaches: must not be empty".into());
        }
        for approach in &self.sweep.approaches {
            if !matches!(approach.as_str(), "concatenation" | "summation") {
                issues.push(format!(
                    "sweep.approaches: expected \"concatenation\" or \"summation\", got \"{approach}\""
                ));
            }
        }
        if self.sweep.seeds.is_empty() {
            issues.push("sweep.seeds: must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.report.target_auprc) {
            issues.push(format!(
                "report.target_auprc: must be in [0, 1], got {}",
                self.report.target_auprc
            ));
        }
        if self.report.alphas.is_empty() {
            issues.push("report.alphas: must not be empty".into());
        }
        for alpha in &self.report.alphas {
            if !(*alpha > 1.0 && *alpha <= 2.0) {
                issues.push(format!("report.alphas: values must be in (1, 2], got {alpha}"));
            }
        }
        if !(self.report.pbm_constant > 0.0) {
            issues.push("report.pbm_constant: must be positive".into());
        }
        if self.report.float_bits == 0 {
            issues.push("report.float_bits: must be positive".into());
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues.join("; ")))
        }
    }

    /// The training mode configured under `[train]`.
    pub fn train_mode(&self) -> TrainMode {
        parse_mode(&self.train.approach, &self.train.fusion_arity)
            .expect("validated at load time")
    }

    pub fn optimizer(&self) -> OptimizerKind {
        parse_optimizer(&self.train.optimizer).expect("validated at load time")
    }

    /// Builds the core training config for one run. `beta` overrides both
    /// PBM slopes when set (sweep points); the seed is the run seed.
    pub fn train_config(&self, mode: TrainMode, beta: Option<f64>, seed: u64) -> TrainConfig {
        let fwd_slope = beta.unwrap_or(self.privacy.fwd_beta);
        let bank_slope = beta.unwrap_or(self.privacy.bank_beta);
        TrainConfig {
            mode,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            embedding_dim: self.model.embedding_dim,
            learning_rate: self.train.learning_rate,
            optimizer: self.optimizer(),
            privacy: PrivacyParams {
                sigma2: self.privacy.sigma2.filter(|s| *s > 0.0),
                fwd_bins: self.privacy.fwd_bins,
                fwd_slope,
                bank_bins: self.privacy.bank_bins,
                bank_slope,
                clip_bound: self.privacy.clip_bound,
            },
            transaction_hidden: self.model.transaction_hidden.clone(),
            account_hidden: self.model.account_hidden.clone(),
            fusion_hidden: self.model.fusion_hidden.clone(),
            seed,
            float_bits: self.report.float_bits,
            alphas: self.report.alphas.clone(),
            pbm_constant: self.report.pbm_constant,
            standalone_active_party: false,
            audit_messages: self.output.audit_messages,
        }
    }
}

pub fn parse_mode(approach: &str, fusion_arity: &str) -> Option<TrainMode> {
    match approach {
        "concatenation" => Some(TrainMode::Concatenation),
        "summation" => Some(TrainMode::Summation),
        "none" => match fusion_arity {
            "concat" => Some(TrainMode::NoPrivacy(FusionArity::Concatenate)),
            "sum" => Some(TrainMode::NoPrivacy(FusionArity::Sum)),
            _ => None,
        },
        _ => None,
    }
}

pub fn parse_optimizer(name: &str) -> Option<OptimizerKind> {
    match name {
        "adam" => Some(OptimizerKind::Adam),
        "sgd" => Some(OptimizerKind::Sgd),
        _ => None,
    }
}
