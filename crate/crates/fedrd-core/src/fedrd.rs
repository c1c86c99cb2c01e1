//! The federated training orchestrator: party simulation, both
//! forward-sharing approaches, gradient routing, bank descent-step
//! aggregation, and evaluation.
//!
//! One iteration follows the protocol loop: sample a minibatch; each party
//! computes its embeddings; embeddings reach the active party through the
//! configured mechanism (Gaussian noise and concatenation, or PBM
//! quantization with secure summation); the active party updates the fusion
//! model and routes loss partials back; the transaction party applies its
//! chain-rule step; banks clip, quantize, and securely average their
//! descent steps, and every bank replica applies the same broadcast update.
//!
//! Gradients pass straight through the privacy mechanisms: the partial with
//! respect to a shared embedding is applied to the clean embedding's tape
//! (identity Jacobian). Backpropagated partials travel in the clear, which
//! the privacy analysis covers by post-processing.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::accountant::{self, Approach, BudgetInputs, PrivacyReport};
use crate::comms::{Channel, ClosedFormInputs, CommLedger};
use crate::data::{EpochSampler, RelationalDataset};
use crate::mech::{self, MechError, PbmParams, QuantizedVector};
use crate::metrics::{self, MetricsError};
use crate::nn::{self, ModelSpec, NnError, OptimizerKind, OptimizerState, ParamSet, Tape};
use crate::rng::StreamRng;
use crate::secagg::{self, RingConfig, SecAggError};

#[derive(Debug)]
pub enum FedError {
    InvalidConfig(String),
    Nn(NnError),
    Mech(MechError),
    SecAgg(SecAggError),
    Metrics(MetricsError),
    Accountant(accountant::AccountantError),
    Data(crate::data::DataError),
    /// A protocol step failed while handling one sample.
    AtSample {
        iteration: u64,
        transaction: String,
        source: Box<FedError>,
    },
    /// Bank replicas stopped being bit-identical after an update.
    ReplicaDivergence { iteration: u64 },
    NonFiniteLoss { iteration: u64 },
}

impl fmt::Display for FedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FedError::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
            FedError::Nn(e) => write!(f, "model error: {e}"),
            FedError::Mech(e) => write!(f, "mechanism error: {e}"),
            FedError::SecAgg(e) => write!(f, "secure aggregation error: {e}"),
            FedError::Metrics(e) => write!(f, "metric error: {e}"),
            FedError::Accountant(e) => write!(f, "accountant error: {e}"),
            FedError::Data(e) => write!(f, "data error: {e}"),
            FedError::AtSample {
                iteration,
                transaction,
                source,
            } => write!(f, "iteration {iteration}, transaction {transaction}: {source}"),
            FedError::ReplicaDivergence { iteration } => {
                write!(f, "bank replicas diverged after iteration {iteration}")
            }
            FedError::NonFiniteLoss { iteration } => {
                write!(f, "non-finite loss at iteration {iteration}")
            }
        }
    }
}

impl core::error::Error for FedError {}

impl From<NnError> for FedError {
    fn from(e: NnError) -> Self {
        FedError::Nn(e)
    }
}
impl From<MechError> for FedError {
    fn from(e: MechError) -> Self {
        FedError::Mech(e)
    }
}
impl From<SecAggError> for FedError {
    fn from(e: SecAggError) -> Self {
        FedError::SecAgg(e)
    }
}
impl From<MetricsError> for FedError {
    fn from(e: MetricsError) -> Self {
        FedError::Metrics(e)
    }
}
impl From<accountant::AccountantError> for FedError {
    fn from(e: accountant::AccountantError) -> Self {
        FedError::Accountant(e)
    }
}
impl From<crate::data::DataError> for FedError {
    fn from(e: crate::data::DataError) -> Self {
        FedError::Data(e)
    }
}

/// How the active party combines the three embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionArity {
    Concatenate,
    Sum,
}

/// Privacy mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Gaussian-perturbed embeddings, concatenated fusion input (length 3P).
    Concatenation,
    /// PBM-quantized embeddings, securely summed fusion input (length P).
    Summation,
    /// Mechanisms disabled; clean concatenation or clean sum.
    NoPrivacy(FusionArity),
}

impl TrainMode {
    pub fn arity(self) -> FusionArity {
        match self {
            TrainMode::Concatenation => FusionArity::Concatenate,
            TrainMode::Summation => FusionArity::Sum,
            TrainMode::NoPrivacy(arity) => arity,
        }
    }

    pub fn is_private(self) -> bool {
        !matches!(self, TrainMode::NoPrivacy(_))
    }

    pub fn approach(self) -> Option<Approach> {
        match self {
            TrainMode::Concatenation => Some(Approach::Concatenation),
            TrainMode::Summation => Some(Approach::Summation),
            TrainMode::NoPrivacy(_) => None,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Concatenation => write!(f, "concatenation"),
            TrainMode::Summation => write!(f, "summation"),
            TrainMode::NoPrivacy(FusionArity::Concatenate) => write!(f, "none-concat"),
            TrainMode::NoPrivacy(FusionArity::Sum) => write!(f, "none-sum"),
        }
    }
}

/// Mechanism parameters for both sharing directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    /// Gaussian variance for the concatenation approach; `None` derives
    /// `4 / (b beta^2)`, which equalizes the two approaches' budgets.
    pub sigma2: Option<f64>,
    /// Forward embedding PBM bins and slope (b, beta).
    pub fwd_bins: u32,
    pub fwd_slope: f64,
    /// Bank gradient PBM bins and slope (b', beta').
    pub bank_bins: u32,
    pub bank_slope: f64,
    /// Clip bound k for bank descent steps.
    pub clip_bound: f64,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            sigma2: None,
            fwd_bins: 64,
            fwd_slope: 0.25,
            bank_bins: 1024,
            bank_slope: 0.25,
            clip_bound: 1.0,
        }
    }
}

impl PrivacyParams {
    pub fn effective_sigma2(&self) -> f64 {
        match self.sigma2 {
            Some(s) => s,
            None => 4.0 / (self.fwd_bins as f64 * self.fwd_slope * self.fwd_slope),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: u64,
    pub batch_size: usize,
    /// Embedding length P.
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub privacy: PrivacyParams,
    pub transaction_hidden: Vec<usize>,
    pub account_hidden: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    pub seed: u64,
    /// Float width F used for cost accounting.
    pub float_bits: u32,
    /// Renyi orders for the attached privacy report.
    pub alphas: Vec<f64>,
    pub pbm_constant: f64,
    /// Model labels as a fourth standalone active party instead of the
    /// transaction party; changes only message attribution.
    pub standalone_active_party: bool,
    /// Capture the cross-party message log (payloads included) for audits.
    pub audit_messages: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Summation,
            epochs: 30,
            batch_size: 128,
            embedding_dim: 64,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            privacy: PrivacyParams::default(),
            transaction_hidden: vec![128, 64],
            account_hidden: vec![128, 64],
            fusion_hidden: vec![32],
            seed: 0,
            float_bits: crate::comms::DEFAULT_FLOAT_BITS,
            alphas: vec![1.5, 2.0],
            pbm_constant: 1.0,
            standalone_active_party: false,
            audit_messages: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, ds: &RelationalDataset) -> Result<(), FedError> {
        if self.embedding_dim == 0 {
            return Err(FedError::InvalidConfig(String::from("embedding_dim must be positive")));
        }
        if self.batch_size == 0 || self.batch_size > ds.len() {
            return Err(FedError::InvalidConfig(alloc::format!(
                "batch_size {} not in 1..={}",
                self.batch_size,
                ds.len()
            )));
        }
        if ds.banks() < 2 {
            return Err(FedError::InvalidConfig(String::from(
                "bank aggregation needs at least 2 banks",
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(FedError::InvalidConfig(String::from("learning_rate must be positive")));
        }
        if self.float_bits == 0 {
            return Err(FedError::InvalidConfig(String::from("float_bits must be positive")));
        }
        if self.mode.is_private() {
            let p = &self.privacy;
            if matches!(self.mode, TrainMode::Summation) && p.fwd_slope == 0.0 {
                return Err(FedError::InvalidConfig(String::from(
                    "summation needs fwd_slope > 0 to dequantize",
                )));
            }
            if matches!(self.mode, TrainMode::Concatenation) && !(p.effective_sigma2() > 0.0) {
                return Err(FedError::InvalidConfig(String::from(
                    "concatenation needs a positive noise variance",
                )));
            }
            if p.bank_slope == 0.0 {
                return Err(FedError::InvalidConfig(String::from(
                    "bank aggregation needs bank_slope > 0 to dequantize",
                )));
            }
            if !(p.clip_bound > 0.0) {
                return Err(FedError::InvalidConfig(String::from("clip_bound must be positive")));
            }
            // Parameter ranges checked by the mechanism constructors.
            PbmParams::new(p.fwd_bins, p.fwd_slope, 1.0, FORWARD_PARTIES as u32)?;
            PbmParams::new(p.bank_bins, p.bank_slope, p.clip_bound, ds.banks() as u32)?;
            if self.alphas.is_empty() {
                return Err(FedError::InvalidConfig(String::from(
                    "private runs need at least one alpha order",
                )));
            }
        }
        Ok(())
    }

    /// Iterations per epoch on a dataset of `n` transactions.
    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        EpochSampler::batches_per_epoch(n, self.batch_size)
    }
}

/// Parties of the simulation. `Active` stands for a standalone active
/// party; by default the transaction party plays that role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Transaction,
    Bank(usize),
    Active,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Transaction => write!(f, "transaction"),
            Party::Bank(i) => write!(f, "bank{}", i + 1),
            Party::Active => write!(f, "active"),
        }
    }
}

/// Protection applied to a message payload before it crossed parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    GaussianNoise,
    PbmMasked,
    /// Sent in the clear (backward partials, broadcast aggregates,
    /// no-privacy ablation traffic).
    Clear,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::GaussianNoise => write!(f, "gaussian"),
            Mechanism::PbmMasked => write!(f, "pbm+mask"),
            Mechanism::Clear => write!(f, "clear"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Real(Vec<f64>),
    Ring(Vec<u64>),
}

/// One cross-party message, as captured for audits.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageRecord {
    pub iteration: u64,
    pub channel: Channel,
    pub from: Party,
    pub to: Party,
    pub mechanism: Mechanism,
    pub payload: Payload,
}

/// Audit log of cross-party messages plus the raw values the mechanisms
/// protected. A leak audit asserts that no protected value ever appears
/// verbatim in any message payload.
#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    enabled: bool,
    pub records: Vec<MessageRecord>,
    /// Raw embeddings that were mechanism-processed before sharing.
    pub protected_reals: Vec<Vec<f64>>,
    /// Raw quantized gradients that were masked before sharing.
    pub protected_quantized: Vec<Vec<u64>>,
}

impl MessageLog {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    fn push(&mut self, record: MessageRecord) {
        if self.enabled {
            self.records.push(record);
        }
    }

    fn protect_real(&mut self, values: &[f64]) {
        if self.enabled {
            self.protected_reals.push(values.to_vec());
        }
    }

    fn protect_quantized(&mut self, values: &[u32]) {
        if self.enabled {
            self.protected_quantized
                .push(values.iter().map(|&v| v as u64).collect());
        }
    }

    /// Line-delimited dump for offline auditing.
    pub fn render_lines(&self) -> String {
        use core::fmt::Write as _;
        let mut out = String::new();
        for r in &self.records {
            let payload = match &r.payload {
                Payload::Real(v) => alloc::format!("real:{}", v.len()),
                Payload::Ring(v) => alloc::format!("ring:{}", v.len()),
            };
            let _ = writeln!(
                out,
                "iteration={} channel={} from={} to={} mechanism={} payload={}",
                r.iteration, r.channel, r.from, r.to, r.mechanism, payload
            );
        }
        out
    }
}

/// The three model bodies: one transaction model, one fusion model, and one
/// account model replicated per bank. Replicas stay bit-identical because
/// every bank applies the same broadcast update.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub transaction: ParamSet,
    pub fusion: ParamSet,
    pub banks: Vec<ParamSet>,
}

impl ModelBundle {
    pub fn account_params(&self) -> usize {
        self.banks[0].scalar_count()
    }
}

/// Per-epoch curves, communication bits, and the attached privacy report.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub train_loss: Vec<f64>,
    pub test_auprc: Vec<f64>,
    /// Test AUPRC of the initial (untrained) model.
    pub initial_auprc: f64,
    pub bits_forward: Vec<u64>,
    pub bits_backward: Vec<u64>,
    pub bits_bankagg: Vec<u64>,
    pub ledger: CommLedger,
    pub privacy: Option<PrivacyReport>,
    /// Total iterations run (Q).
    pub iterations: u64,
    /// Account-model scalar count, for the cost closed forms.
    pub account_params: usize,
    /// Bank count of the dataset the run trained on.
    pub banks: usize,
    /// Filled by callers that can measure time; the core library cannot.
    pub wall_clock_secs: f64,
    pub message_log: MessageLog,
}

impl TrainingReport {
    pub fn max_auprc(&self) -> f64 {
        self.test_auprc
            .iter()
            .copied()
            .fold(self.initial_auprc, f64::max)
    }

    /// First 1-based epoch whose test AUPRC reaches `target`, if any.
    pub fn epochs_to_target(&self, target: f64) -> Option<u64> {
        self.test_auprc
            .iter()
            .position(|&a| a >= target)
            .map(|i| i as u64 + 1)
    }

    /// Inputs for the communication closed forms, when the run was private.
    pub fn closed_form_inputs(&self) -> Option<ClosedFormInputs> {
        let approach = self.config.mode.approach()?;
        Some(ClosedFormInputs {
            approach,
            iterations: self.iterations,
            batch_size: self.config.batch_size as u64,
            embedding_dim: self.config.embedding_dim as u64,
            float_bits: self.config.float_bits,
            fwd_bins: self.config.privacy.fwd_bins,
            bank_bins: self.config.privacy.bank_bins,
            banks: self.banks as u64,
            account_params: self.account_params as u64,
        })
    }

}

/// Number of parties in the forward secure sum: transaction, sender bank,
/// receiver bank.
const FORWARD_PARTIES: u64 = accountant::FORWARD_SUM_PARTIES;

mod stream {
    pub const INIT_TRANSACTION: u64 = 1;
    pub const INIT_ACCOUNT: u64 = 2;
    pub const INIT_FUSION: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const FWD_GAUSS: u64 = 5;
    pub const FWD_PBM: u64 = 6;
    pub const FWD_MASK: u64 = 7;
    pub const BANK_PBM: u64 = 8;
    pub const BANK_MASK: u64 = 9;
    pub const EVAL: u64 = 10;
}

struct BatchForward {
    fusion_inputs: Vec<Vec<f64>>,
    labels: Vec<u8>,
    txn_tapes: Vec<Tape>,
    /// Two per sample (sender, then receiver): owning bank plus tape.
    account_tapes: Vec<(usize, Tape)>,
}

/// Iteration-level driver of the protocol. [`run_training`] wraps it; tests
/// and oracles can also drive it batch by batch.
pub struct FedRdTrainer<'a> {
    cfg: TrainConfig,
    train: &'a RelationalDataset,
    bundle: ModelBundle,
    opt_transaction: OptimizerState,
    opt_fusion: OptimizerState,
    opt_bank: OptimizerState,
    ledger: CommLedger,
    log: MessageLog,
    iteration: u64,
}

impl<'a> FedRdTrainer<'a> {
    pub fn new(cfg: TrainConfig, train: &'a RelationalDataset) -> Result<Self, FedError> {
        cfg.validate(train)?;
        let p = cfg.embedding_dim;
        let fusion_input = match cfg.mode.arity() {
            FusionArity::Concatenate => 3 * p,
            FusionArity::Sum => p,
        };
        let txn_spec = ModelSpec::embedding(train.transaction_dim(), &cfg.transaction_hidden, p)?;
        let acct_spec = ModelSpec::embedding(train.account_dim(), &cfg.account_hidden, p)?;
        let fusion_spec = ModelSpec::fusion(fusion_input, &cfg.fusion_hidden)?;

        let transaction = nn::build_model(&txn_spec, crate::rng::derive(cfg.seed, &[stream::INIT_TRANSACTION]))?;
        let account = nn::build_model(&acct_spec, crate::rng::derive(cfg.seed, &[stream::INIT_ACCOUNT]))?;
        let fusion = nn::build_model(&fusion_spec, crate::rng::derive(cfg.seed, &[stream::INIT_FUSION]))?;
        let banks = vec![account; train.banks()];

        let opt_transaction = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &txn_spec);
        let opt_fusion = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &fusion_spec);
        let opt_bank = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &acct_spec);

        let ledger = CommLedger::new(cfg.float_bits);
        let log = MessageLog::new(cfg.audit_messages);
        Ok(Self {
            cfg,
            train,
            bundle: ModelBundle {
                transaction,
                fusion,
                banks,
            },
            opt_transaction,
            opt_fusion,
            opt_bank,
            ledger,
            log,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn message_log(&self) -> &MessageLog {
        &self.log
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn active_party(&self) -> Party {
        if self.cfg.standalone_active_party {
            Party::Active
        } else {
            Party::Transaction
        }
    }

    /// Forward phase for one minibatch of transaction indices.
    fn forward_phase(&mut self, batch: &[usize]) -> Result<BatchForward, FedError> {
        let p = self.cfg.embedding_dim;
        let float_bits = self.cfg.float_bits as u64;
        let seed = self.cfg.seed;
        let iteration = self.iteration;
        let active = self.active_party();

        let mut out = BatchForward {
            fusion_inputs: Vec::with_capacity(batch.len()),
            labels: Vec::with_capacity(batch.len()),
            txn_tapes: Vec::with_capacity(batch.len()),
            account_tapes: Vec::with_capacity(2 * batch.len()),
        };

        for &idx in batch {
            let txn = self.train.transaction(idx);
            let with_context = |e: FedError| FedError::AtSample {
                iteration,
                transaction: txn.id.clone(),
                source: Box::new(e),
            };

            let (e_t, tape_t) =
                nn::forward(&self.bundle.transaction, &txn.features).map_err(|e| with_context(e.into()))?;
            let sender = self.train.account(txn.sender);
            let receiver = self.train.account(txn.receiver);
            let sender_bank = sender.bank - 1;
            let receiver_bank = receiver.bank - 1;
            let (e_s, tape_s) = nn::forward(&self.bundle.banks[sender_bank], &sender.features)
                .map_err(|e| with_context(e.into()))?;
            let (e_r, tape_r) = nn::forward(&self.bundle.banks[receiver_bank], &receiver.features)
                .map_err(|e| with_context(e.into()))?;

            let sources = [
                (Party::Transaction, &e_t),
                (Party::Bank(sender_bank), &e_s),
                (Party::Bank(receiver_bank), &e_r),
            ];

            let fusion_input = match self.cfg.mode {
                TrainMode::Concatenation => {
                    let sigma2 = self.cfg.privacy.effective_sigma2();
                    let mut concat = Vec::with_capacity(3 * p);
                    for (code, (party, embedding)) in sources.iter().enumerate() {
                        let mut rng = StreamRng::from_path(
                            seed,
                            &[stream::FWD_GAUSS, iteration, idx as u64, code as u64],
                        );
                        let noisy = mech::gaussian_perturb(embedding, sigma2, &mut rng)
                            .map_err(|e| with_context(e.into()))?;
                        self.ledger
                            .record(Channel::ForwardEmbeddings, p as u64 * float_bits, iteration);
                        self.log.protect_real(embedding);
                        self.log.push(MessageRecord {
                            iteration,
                            channel: Channel::ForwardEmbeddings,
                            from: *party,
                            to: active,
                            mechanism: Mechanism::GaussianNoise,
                            payload: Payload::Real(noisy.clone()),
                        });
                        concat.extend_from_slice(&noisy);
                    }
                    concat
                }
                TrainMode::Summation => {
                    let params = PbmParams::new(
                        self.cfg.privacy.fwd_bins,
                        self.cfg.privacy.fwd_slope,
                        1.0,
                        FORWARD_PARTIES as u32,
                    )
                    .map_err(|e| with_context(e.into()))?;
                    let mut quantized = Vec::with_capacity(3);
                    for (code, (_, embedding)) in sources.iter().enumerate() {
                        let mut rng = StreamRng::from_path(
                            seed,
                            &[stream::FWD_PBM, iteration, idx as u64, code as u64],
                        );
                        let q = mech::pbm_quantize_vec(embedding, &params, &mut rng)
                            .map_err(|e| with_context(e.into()))?;
                        self.log.protect_real(embedding);
                        self.log.protect_quantized(q.values());
                        quantized.push(q);
                    }
                    // A bank owning both endpoints contributes one merged
                    // input; the secure sum then runs over two parties.
                    let (inputs, senders): (Vec<QuantizedVector>, Vec<Party>) =
                        if sender_bank == receiver_bank {
                            let merged = quantized[1]
                                .merge_sum(&quantized[2])
                                .map_err(|e| with_context(e.into()))?;
                            (
                                vec![quantized[0].clone(), merged],
                                vec![Party::Transaction, Party::Bank(sender_bank)],
                            )
                        } else {
                            (
                                quantized.clone(),
                                vec![
                                    Party::Transaction,
                                    Party::Bank(sender_bank),
                                    Party::Bank(receiver_bank),
                                ],
                            )
                        };
                    let ring =
                        RingConfig::for_sum(FORWARD_PARTIES as u32, self.cfg.privacy.fwd_bins);
                    let mut mask_rng =
                        StreamRng::from_path(seed, &[stream::FWD_MASK, iteration, idx as u64]);
                    let (sum, trace) = secagg::secure_sum(&inputs, &ring, &mut mask_rng)
                        .map_err(|e| with_context(e.into()))?;
                    for msg in &trace {
                        self.ledger.record(
                            Channel::ForwardEmbeddings,
                            secagg::message_bits(msg, &ring),
                            iteration,
                        );
                        self.log.push(MessageRecord {
                            iteration,
                            channel: Channel::ForwardEmbeddings,
                            from: senders[msg.sender],
                            to: active,
                            mechanism: Mechanism::PbmMasked,
                            payload: Payload::Ring(msg.values.clone()),
                        });
                    }
                    mech::pbm_sum_estimate(&sum, &params).map_err(|e| with_context(e.into()))?
                }
                TrainMode::NoPrivacy(arity) => {
                    for (party, embedding) in &sources {
                        self.ledger
                            .record(Channel::ForwardEmbeddings, p as u64 * float_bits, iteration);
                        self.log.push(MessageRecord {
                            iteration,
                            channel: Channel::ForwardEmbeddings,
                            from: *party,
                            to: active,
                            mechanism: Mechanism::Clear,
                            payload: Payload::Real((*embedding).clone()),
                        });
                    }
                    match arity {
                        FusionArity::Concatenate => {
                            let mut concat = Vec::with_capacity(3 * p);
                            concat.extend_from_slice(&e_t);
                            concat.extend_from_slice(&e_s);
                            concat.extend_from_slice(&e_r);
                            concat
                        }
                        FusionArity::Sum => e_t
                            .iter()
                            .zip(&e_s)
                            .zip(&e_r)
                            .map(|((a, b), c)| a + b + c)
                            .collect(),
                    }
                }
            };

            out.fusion_inputs.push(fusion_input);
            out.labels.push(txn.label);
            out.txn_tapes.push(tape_t);
            out.account_tapes.push((sender_bank, tape_s));
            out.account_tapes.push((receiver_bank, tape_r));
        }
        Ok(out)
    }

    /// Routes per-sample loss partials to the three parties and records the
    /// backward traffic. Returns `(transaction, sender, receiver)` partials
    /// per sample.
    fn route_partials(&mut self, batch: &[usize], partials: &[Vec<f64>]) -> Vec<[Vec<f64>; 3]> {
        let p = self.cfg.embedding_dim;
        let float_bits = self.cfg.float_bits as u64;
        let active = self.active_party();
        let mut routed = Vec::with_capacity(partials.len());
        for (&idx, partial) in batch.iter().zip(partials) {
            let txn = self.train.transaction(idx);
            let sender_bank = self.train.account(txn.sender).bank - 1;
            let receiver_bank = self.train.account(txn.receiver).bank - 1;
            let slices: [Vec<f64>; 3] = match self.cfg.mode.arity() {
                FusionArity::Concatenate => [
                    partial[0..p].to_vec(),
                    partial[p..2 * p].to_vec(),
                    partial[2 * p..3 * p].to_vec(),
                ],
                // The partial with respect to the sum is shared by all
                // three addends.
                FusionArity::Sum => [partial.clone(), partial.clone(), partial.clone()],
            };
            let destinations = [
                Party::Transaction,
                Party::Bank(sender_bank),
                Party::Bank(receiver_bank),
            ];
            for (to, slice) in destinations.iter().zip(&slices) {
                self.ledger
                    .record(Channel::BackwardPartials, p as u64 * float_bits, self.iteration);
                self.log.push(MessageRecord {
                    iteration: self.iteration,
                    channel: Channel::BackwardPartials,
                    from: active,
                    to: *to,
                    mechanism: Mechanism::Clear,
                    payload: Payload::Real(slice.clone()),
                });
            }
            routed.push(slices);
        }
        routed
    }

    /// Bank-side descent aggregation: per-bank chain-rule gradients, clip,
    /// quantize, secure sum, dequantize at bank 1, broadcast, and one shared
    /// optimizer update applied at every replica.
    fn bank_aggregate_step(
        &mut self,
        account_tapes: Vec<(usize, Tape)>,
        account_partials: Vec<(usize, Vec<f64>)>,
    ) -> Result<(), FedError> {
        let banks = self.train.banks();
        let spec = self.bundle.banks[0].spec().clone();
        let iteration = self.iteration;
        let float_bits = self.cfg.float_bits as u64;

        let mut per_bank = vec![ParamSet::zeros(&spec); banks];
        for ((bank, tape), (bank2, partial)) in account_tapes.into_iter().zip(account_partials) {
            debug_assert_eq!(bank, bank2);
            nn::backward_accumulate(&self.bundle.banks[bank], tape, &partial, &mut per_bank[bank])?;
        }
        // Scale so (1/K) * sum_i g_i is the batch-mean account gradient
        // (partials already carry the 1/B of the mean loss).
        for g in &mut per_bank {
            g.scale(banks as f64);
        }

        let theta_b = spec.param_count();
        let aggregate: Vec<f64> = if self.cfg.mode.is_private() {
            let p = &self.cfg.privacy;
            let params = PbmParams::new(p.bank_bins, p.bank_slope, p.clip_bound, banks as u32)?;
            let mut quantized = Vec::with_capacity(banks);
            for (bank, grads) in per_bank.iter().enumerate() {
                let clipped = mech::clip(&grads.flatten(), p.clip_bound);
                let mut rng = StreamRng::from_path(
                    self.cfg.seed,
                    &[stream::BANK_PBM, iteration, bank as u64],
                );
                let q = mech::pbm_quantize_vec(&clipped, &params, &mut rng)?;
                self.log.protect_quantized(q.values());
                quantized.push(q);
            }
            let ring = RingConfig::for_sum(banks as u32, p.bank_bins);
            let mut mask_rng =
                StreamRng::from_path(self.cfg.seed, &[stream::BANK_MASK, iteration]);
            let (sum, trace) = secagg::secure_sum(&quantized, &ring, &mut mask_rng)?;
            for msg in &trace {
                self.ledger.record(
                    Channel::BankMaskedGradients,
                    secagg::message_bits(msg, &ring),
                    iteration,
                );
                self.log.push(MessageRecord {
                    iteration,
                    channel: Channel::BankMaskedGradients,
                    from: Party::Bank(msg.sender),
                    to: Party::Bank(0),
                    mechanism: Mechanism::PbmMasked,
                    payload: Payload::Ring(msg.values.clone()),
                });
            }
            mech::pbm_sum_estimate(&sum, &params)?
        } else {
            // Ablation: exact float sum, still exchanged bank-to-bank.
            for (bank, grads) in per_bank.iter().enumerate() {
                self.ledger.record(
                    Channel::BankMaskedGradients,
                    theta_b as u64 * float_bits,
                    iteration,
                );
                self.log.push(MessageRecord {
                    iteration,
                    channel: Channel::BankMaskedGradients,
                    from: Party::Bank(bank),
                    to: Party::Bank(0),
                    mechanism: Mechanism::Clear,
                    payload: Payload::Real(grads.flatten()),
                });
            }
            let mut total = vec![0.0; theta_b];
            for grads in &per_bank {
                for (acc, v) in total.iter_mut().zip(grads.flatten()) {
                    *acc += v;
                }
            }
            total
        };

        // Bank 1 broadcasts the dequantized aggregate to the other banks.
        for bank in 1..banks {
            self.ledger.record(
                Channel::BankBroadcast,
                theta_b as u64 * float_bits,
                iteration,
            );
            self.log.push(MessageRecord {
                iteration,
                channel: Channel::BankBroadcast,
                from: Party::Bank(0),
                to: Party::Bank(bank),
                mechanism: Mechanism::Clear,
                payload: Payload::Real(aggregate.clone()),
            });
        }

        // theta_B <- theta_B - (eta/K) g for SGD; Adam consumes g/K through
        // one shared state. Every replica applies the same delta.
        let averaged: Vec<f64> = aggregate.iter().map(|g| g / banks as f64).collect();
        let grads = ParamSet::from_flat(&spec, &averaged)?;
        let delta = self.opt_bank.compute_update(&grads)?;
        for replica in &mut self.bundle.banks {
            replica.add_scaled(&delta, 1.0)?;
        }
        let first = &self.bundle.banks[0];
        if !self.bundle.banks.iter().all(|r| r.bits_eq(first)) {
            return Err(FedError::ReplicaDivergence { iteration });
        }
        Ok(())
    }

    /// Runs one full protocol iteration over the given minibatch and
    /// returns the batch-mean training loss.
    pub fn run_iteration(&mut self, batch: &[usize]) -> Result<f64, FedError> {
        let forward = self.forward_phase(batch)?;
        let (loss, partials) = active_step(
            &mut self.bundle.fusion,
            &mut self.opt_fusion,
            &forward.fusion_inputs,
            &forward.labels,
        )?;
        if !loss.is_finite() {
            return Err(FedError::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        let routed = self.route_partials(batch, &partials);

        let txn_partials: Vec<Vec<f64>> = routed.iter().map(|r| r[0].clone()).collect();
        transaction_step(
            &mut self.bundle.transaction,
            &mut self.opt_transaction,
            forward.txn_tapes,
            &txn_partials,
        )?;

        let mut account_partials = Vec::with_capacity(2 * batch.len());
        for (&idx, slices) in batch.iter().zip(&routed) {
            let txn = self.train.transaction(idx);
            account_partials.push((self.train.account(txn.sender).bank - 1, slices[1].clone()));
            account_partials.push((self.train.account(txn.receiver).bank - 1, slices[2].clone()));
        }
        self.bank_aggregate_step(forward.account_tapes, account_partials)?;

        self.iteration += 1;
        Ok(loss)
    }

    /// Test-set AUPRC through the run's sharing path. Private modes apply
    /// their mechanisms at evaluation time too (embeddings cross parties at
    /// inference as well); masks are skipped since they cancel in the sum.
    pub fn evaluate(&self, ds: &RelationalDataset, eval_tag: u64) -> Result<f64, FedError> {
        evaluate_bundle(&self.cfg, &self.bundle, ds, eval_tag)
    }
}

/// Active-party step: fusion forward, batch-mean BCE, one fusion optimizer
/// step, and the per-sample partials of the mean loss with respect to each
/// fusion input.
pub fn active_step(
    fusion: &mut ParamSet,
    opt: &mut OptimizerState,
    inputs: &[Vec<f64>],
    labels: &[u8],
) -> Result<(f64, Vec<Vec<f64>>), FedError> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(FedError::InvalidConfig(alloc::format!(
            "{} fusion inputs vs {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let b = inputs.len() as f64;
    let mut grads = ParamSet::zeros(fusion.spec());
    let mut loss_sum = 0.0;
    let mut partials = Vec::with_capacity(inputs.len());
    for (input, &label) in inputs.iter().zip(labels) {
        let (out, tape) = nn::forward(fusion, input)?;
        let (loss, dpred) = nn::bce_loss(out[0], label)?;
        loss_sum += loss;
        let upstream = [dpred / b];
        let grad_in = nn::backward_accumulate(fusion, tape, &upstream, &mut grads)?;
        partials.push(grad_in);
    }
    opt.step(fusion, &grads)?;
    Ok((loss_sum / b, partials))
}

/// Transaction-party step: accumulate chain-rule gradients over the batch
/// (partials already carry the mean-loss 1/B) and apply one optimizer step.
pub fn transaction_step(
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    tapes: Vec<Tape>,
    partials: &[Vec<f64>],
) -> Result<(), FedError> {
    if tapes.len() != partials.len() {
        return Err(FedError::InvalidConfig(alloc::format!(
            "{} tapes vs {} partials",
            tapes.len(),
            partials.len()
        )));
    }
    let mut grads = ParamSet::zeros(params.spec());
    for (tape, partial) in tapes.into_iter().zip(partials) {
        nn::backward_accumulate(params, tape, partial, &mut grads)?;
    }
    opt.step(params, &grads)?;
    Ok(())
}

fn evaluate_bundle(
    cfg: &TrainConfig,
    bundle: &ModelBundle,
    ds: &RelationalDataset,
    eval_tag: u64,
) -> Result<f64, FedError> {
    let mut scores = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for (idx, txn) in ds.transactions().iter().enumerate() {
        let (e_t, _) = nn::forward(&bundle.transaction, &txn.features)?;
        let sender = ds.account(txn.sender);
        let receiver = ds.account(txn.receiver);
        let (e_s, _) = nn::forward(&bundle.banks[sender.bank - 1], &sender.features)?;
        let (e_r, _) = nn::forward(&bundle.banks[receiver.bank - 1], &receiver.features)?;
        let embeddings = [&e_t, &e_s, &e_r];

        let fusion_input: Vec<f64> = match cfg.mode {
            TrainMode::Concatenation => {
                let sigma2 = cfg.privacy.effective_sigma2();
                let mut concat = Vec::with_capacity(3 * cfg.embedding_dim);
                for (code, e) in embeddings.iter().enumerate() {
                    let mut rng = StreamRng::from_path(
                        cfg.seed,
                        &[stream::EVAL, eval_tag, idx as u64, code as u64],
                    );
                    concat.extend_from_slice(&mech::gaussian_perturb(e, sigma2, &mut rng)?);
                }
                concat
            }
            TrainMode::Summation => {
                let params = PbmParams::new(
                    cfg.privacy.fwd_bins,
                    cfg.privacy.fwd_slope,
                    1.0,
                    FORWARD_PARTIES as u32,
                )?;
                let mut aggregate = vec![0u64; cfg.embedding_dim];
                for (code, e) in embeddings.iter().enumerate() {
                    let mut rng = StreamRng::from_path(
                        cfg.seed,
                        &[stream::EVAL, eval_tag, idx as u64, code as u64],
                    );
                    let q = mech::pbm_quantize_vec(e, &params, &mut rng)?;
                    for (acc, &v) in aggregate.iter_mut().zip(q.values()) {
                        *acc += v as u64;
                    }
                }
                mech::pbm_sum_estimate(&aggregate, &params)?
            }
            TrainMode::NoPrivacy(FusionArity::Concatenate) => {
                let mut concat = Vec::with_capacity(3 * cfg.embedding_dim);
                for e in embeddings {
                    concat.extend_from_slice(e);
                }
                concat
            }
            TrainMode::NoPrivacy(FusionArity::Sum) => e_t
                .iter()
                .zip(&e_s)
                .zip(&e_r)
                .map(|((a, b), c)| a + b + c)
                .collect(),
        };
        let (pred, _) = nn::forward(&bundle.fusion, &fusion_input)?;
        scores.push(pred[0]);
        labels.push(txn.label);
    }
    Ok(metrics::auprc(&scores, &labels)?)
}

fn attach_privacy_report(
    cfg: &TrainConfig,
    train: &RelationalDataset,
    iterations: u64,
    account_params: usize,
) -> Result<Option<PrivacyReport>, FedError> {
    let Some(approach) = cfg.mode.approach() else {
        return Ok(None);
    };
    let inputs = BudgetInputs {
        approach,
        iterations: iterations.max(1),
        dataset_size: train.len() as u64,
        batch_size: cfg.batch_size as u64,
        embedding_dim: cfg.embedding_dim as u64,
        max_account_uses: train.max_account_uses().max(1) as u64,
        banks: train.banks() as u64,
        account_params: account_params as u64,
        alphas: cfg.alphas.clone(),
        sigma2: cfg.privacy.effective_sigma2(),
        fwd_bins: cfg.privacy.fwd_bins,
        fwd_slope: cfg.privacy.fwd_slope,
        bank_bins: cfg.privacy.bank_bins,
        bank_slope: cfg.privacy.bank_slope,
        pbm_constant: cfg.pbm_constant,
    };
    Ok(Some(accountant::budget_report(&inputs)?))
}

/// Full training run: `epochs` passes over the shuffled training set with
/// per-epoch loss, test AUPRC, and communication totals. Deterministic from
/// the config seed.
pub fn run_training(
    cfg: &TrainConfig,
    train: &RelationalDataset,
    test: &RelationalDataset,
) -> Result<TrainingReport, FedError> {
    let mut trainer = FedRdTrainer::new(cfg.clone(), train)?;
    let initial_auprc = trainer.evaluate(test, 0)?;

    let mut train_loss = Vec::new();
    let mut test_auprc = Vec::new();
    let mut bits_forward = Vec::new();
    let mut bits_backward = Vec::new();
    let mut bits_bankagg = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_start = trainer.iteration();
        let mut rng = StreamRng::from_path(cfg.seed, &[stream::BATCH, epoch]);
        let mut sampler = EpochSampler::new(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        while let Some(batch) = sampler.next_batch(cfg.batch_size) {
            let batch = batch.to_vec();
            loss_sum += trainer.run_iteration(&batch)?;
            batches += 1;
        }
        let epoch_end = trainer.iteration();
        train_loss.push(loss_sum / batches as f64);
        test_auprc.push(trainer.evaluate(test, epoch + 1)?);
        let ledger = trainer.ledger();
        bits_forward.push(ledger.range_total(epoch_start, epoch_end, Channel::ForwardEmbeddings));
        bits_backward.push(ledger.range_total(epoch_start, epoch_end, Channel::BackwardPartials));
        bits_bankagg.push(
            ledger.range_total(epoch_start, epoch_end, Channel::BankMaskedGradients)
                + ledger.range_total(epoch_start, epoch_end, Channel::BankBroadcast),
        );
    }

    let iterations = trainer.iteration();
    let account_params = trainer.bundle().account_params();
    let privacy = attach_privacy_report(cfg, train, iterations, account_params)?;
    let FedRdTrainer { ledger, log, .. } = trainer;
    Ok(TrainingReport {
        config: cfg.clone(),
        train_loss,
        test_auprc,
        initial_auprc,
        bits_forward,
        bits_backward,
        bits_bankagg,
        ledger,
        privacy,
        iterations,
        account_params,
        wall_clock_secs: 0.0,
        banks: train.banks(),
        message_log: log,
    })
}

/// Centralized transaction-only baseline: the transaction model feeds the
/// fusion model directly (input length P); no banks, no mechanisms, no
/// cross-party traffic. Fills the benchmark role of a transaction-feature
/// model.
pub fn run_transaction_only(
    cfg: &TrainConfig,
    train: &RelationalDataset,
    test: &RelationalDataset,
) -> Result<TrainingReport, FedError> {
    if cfg.batch_size == 0 || cfg.batch_size > train.len() {
        return Err(FedError::InvalidConfig(alloc::format!(
            "batch_size {} not in 1..={}",
            cfg.batch_size,
            train.len()
        )));
    }
    let p = cfg.embedding_dim;
    let txn_spec = ModelSpec::embedding(train.transaction_dim(), &cfg.transaction_hidden, p)?;
    let fusion_spec = ModelSpec::fusion(p, &cfg.fusion_hidden)?;
    let mut transaction = nn::build_model(
        &txn_spec,
        crate::rng::derive(cfg.seed, &[stream::INIT_TRANSACTION]),
    )?;
    let mut fusion = nn::build_model(
        &fusion_spec,
        crate::rng::derive(cfg.seed, &[stream::INIT_FUSION]),
    )?;
    let mut opt_txn = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &txn_spec);
    let mut opt_fusion = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &fusion_spec);

    let evaluate = |transaction: &ParamSet, fusion: &ParamSet| -> Result<f64, FedError> {
        let mut scores = Vec::with_capacity(test.len());
        let mut labels = Vec::with_capacity(test.len());
        for txn in test.transactions() {
            let (e_t, _) = nn::forward(transaction, &txn.features)?;
            let (pred, _) = nn::forward(fusion, &e_t)?;
            scores.push(pred[0]);
            labels.push(txn.label);
        }
        Ok(metrics::auprc(&scores, &labels)?)
    };

    let initial_auprc = evaluate(&transaction, &fusion)?;
    let mut train_loss = Vec::new();
    let mut test_auprc = Vec::new();
    let mut iterations = 0u64;
    for epoch in 0..cfg.epochs {
        let mut rng = StreamRng::from_path(cfg.seed, &[stream::BATCH, epoch]);
        let mut sampler = EpochSampler::new(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        while let Some(batch) = sampler.next_batch(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            let mut tapes = Vec::with_capacity(batch.len());
            for &idx in batch {
                let txn = train.transaction(idx);
                let (e_t, tape) = nn::forward(&transaction, &txn.features)?;
                inputs.push(e_t);
                labels.push(txn.label);
                tapes.push(tape);
            }
            let (loss, partials) = active_step(&mut fusion, &mut opt_fusion, &inputs, &labels)?;
            transaction_step(&mut transaction, &mut opt_txn, tapes, &partials)?;
            loss_sum += loss;
            batches += 1;
            iterations += 1;
        }
        train_loss.push(loss_sum / batches as f64);
        test_auprc.push(evaluate(&transaction, &fusion)?);
    }

    let epochs = cfg.epochs as usize;
    Ok(TrainingReport {
        config: cfg.clone(),
        train_loss,
        test_auprc,
        initial_auprc,
        bits_forward: vec![0; epochs],
        bits_backward: vec![0; epochs],
        bits_bankagg: vec![0; epochs],
        ledger: CommLedger::new(cfg.float_bits),
        privacy: None,
        iterations,
        account_params: 0,
        wall_clock_secs: 0.0,
        banks: train.banks(),
        message_log: MessageLog::new(false),
    })
}
