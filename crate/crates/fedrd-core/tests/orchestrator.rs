//! Cross-module orchestrator checks: ablation equivalence against a
//! centralized reference, leak-point audits of the message log, and
//! scheduling-independent determinism.

use fedrd_core::data::{generate, GenConfig, RelationalDataset};
use fedrd_core::fedrd::{
    FedRdTrainer, FusionArity, Mechanism, Payload, PrivacyParams, TrainConfig, TrainMode,
};
use fedrd_core::nn::{self, OptimizerKind, OptimizerState, ParamSet};
use fedrd_core::comms::Channel;
use fedrd_core::rng::StreamRng;

fn dataset(n: usize, banks: usize, seed: u64) -> RelationalDataset {
    generate(&GenConfig {
        transactions: n,
        banks,
        accounts_per_bank: 16,
        transaction_dim: 5,
        account_dim: 4,
        positive_rate: 0.2,
        transaction_signal: 1.0,
        account_signal: 1.0,
        allow_same_bank: false,
        seed,
    })
    .unwrap()
}

fn config(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 2,
        batch_size: 16,
        embedding_dim: 4,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Sgd,
        privacy: PrivacyParams {
            sigma2: None,
            fwd_bins: 16,
            fwd_slope: 0.25,
            bank_bins: 64,
            bank_slope: 0.25,
            clip_bound: 1.0,
        },
        transaction_hidden: vec![6],
        account_hidden: vec![5],
        fusion_hidden: vec![4],
        seed,
        float_bits: 32,
        alphas: vec![2.0],
        pbm_constant: 1.0,
        standalone_active_party: false,
        audit_messages: false,
    }
}

fn max_relative_gap(a: &ParamSet, b: &ParamSet) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Centralized reference: same three model bodies, clean embedding sums,
/// plain batch-mean SGD on one shared account model. Independent of the
/// orchestrator's party plumbing.
struct CentralizedReference {
    transaction: ParamSet,
    account: ParamSet,
    fusion: ParamSet,
    opt_t: OptimizerState,
    opt_b: OptimizerState,
    opt_f: OptimizerState,
}

impl CentralizedReference {
    fn from_initial(bundle: &fedrd_core::fedrd::ModelBundle, learning_rate: f64) -> Self {
        Self {
            transaction: bundle.transaction.clone(),
            account: bundle.banks[0].clone(),
            fusion: bundle.fusion.clone(),
            opt_t: OptimizerState::new(OptimizerKind::Sgd, learning_rate, bundle.transaction.spec()),
            opt_b: OptimizerState::new(OptimizerKind::Sgd, learning_rate, bundle.banks[0].spec()),
            opt_f: OptimizerState::new(OptimizerKind::Sgd, learning_rate, bundle.fusion.spec()),
        }
    }

    fn run_iteration(&mut self, ds: &RelationalDataset, batch: &[usize]) {
        let b = batch.len() as f64;
        let mut grads_t = ParamSet::zeros(self.transaction.spec());
        let mut grads_b = ParamSet::zeros(self.account.spec());
        let mut grads_f = ParamSet::zeros(self.fusion.spec());
        for &idx in batch {
            let txn = ds.transaction(idx);
            let (e_t, tape_t) = nn::forward(&self.transaction, &txn.features).unwrap();
            let sender = ds.account(txn.sender);
            let receiver = ds.account(txn.receiver);
            let (e_s, tape_s) = nn::forward(&self.account, &sender.features).unwrap();
            let (e_r, tape_r) = nn::forward(&self.account, &receiver.features).unwrap();
            let fused: Vec<f64> = e_t
                .iter()
                .zip(&e_s)
                .zip(&e_r)
                .map(|((a, b), c)| a + b + c)
                .collect();
            let (out, tape_f) = nn::forward(&self.fusion, &fused).unwrap();
            let (_, dpred) = nn::bce_loss(out[0], txn.label).unwrap();
            let upstream = [dpred / b];
            let grad_in =
                nn::backward_accumulate(&self.fusion, tape_f, &upstream, &mut grads_f).unwrap();
            nn::backward_accumulate(&self.transaction, tape_t, &grad_in, &mut grads_t).unwrap();
            nn::backward_accumulate(&self.account, tape_s, &grad_in, &mut grads_b).unwrap();
            nn::backward_accumulate(&self.account, tape_r, &grad_in, &mut grads_b).unwrap();
        }
        self.opt_t.step(&mut self.transaction, &grads_t).unwrap();
        self.opt_b.step(&mut self.account, &grads_b).unwrap();
        self.opt_f.step(&mut self.fusion, &grads_f).unwrap();
    }
}

#[test]
fn no_privacy_summation_matches_centralized_reference() {
    let ds = dataset(96, 2, 21);
    let cfg = config(TrainMode::NoPrivacy(FusionArity::Sum), 13);
    let mut fed = FedRdTrainer::new(cfg.clone(), &ds).unwrap();
    let mut central = CentralizedReference::from_initial(fed.bundle(), cfg.learning_rate);

    let mut batch_rng = StreamRng::from_key(555);
    for iteration in 0..12 {
        let batch: Vec<usize> = (0..16)
            .map(|_| batch_rng.next_below(ds.len() as u64) as usize)
            .collect();
        fed.run_iteration(&batch).unwrap();
        central.run_iteration(&ds, &batch);

        let bundle = fed.bundle();
        let gap = max_relative_gap(&bundle.transaction, &central.transaction)
            .max(max_relative_gap(&bundle.fusion, &central.fusion))
            .max(max_relative_gap(&bundle.banks[0], &central.account))
            .max(max_relative_gap(&bundle.banks[1], &central.account));
        assert!(gap < 1e-10, "iteration {iteration}: relative gap {gap}");
    }
}

fn payload_leaks(log: &fedrd_core::fedrd::MessageLog) -> bool {
    let real_leak = log.records.iter().any(|r| match &r.payload {
        Payload::Real(values) => log.protected_reals.iter().any(|raw| {
            raw.len() == values.len()
                && raw
                    .iter()
                    .zip(values)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        }),
        Payload::Ring(_) => false,
    });
    let ring_leak = log.records.iter().any(|r| match &r.payload {
        Payload::Ring(values) => log
            .protected_quantized
            .iter()
            .any(|raw| raw == values),
        Payload::Real(_) => false,
    });
    real_leak || ring_leak
}

#[test]
fn summation_messages_never_carry_raw_values() {
    let ds = dataset(64, 3, 22);
    let mut cfg = config(TrainMode::Summation, 14);
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.audit_messages = true;
    let report = fedrd_core::fedrd::run_training(&cfg, &ds, &ds).unwrap();
    let log = &report.message_log;
    assert!(!log.records.is_empty());
    assert!(!log.protected_reals.is_empty());
    assert!(!log.protected_quantized.is_empty());

    for record in &log.records {
        match record.channel {
            Channel::ForwardEmbeddings | Channel::BankMaskedGradients => {
                assert_eq!(record.mechanism, Mechanism::PbmMasked, "{record:?}");
                assert!(matches!(record.payload, Payload::Ring(_)));
            }
            // Post-processing covers the clear backward traffic.
            Channel::BackwardPartials | Channel::BankBroadcast => {
                assert_eq!(record.mechanism, Mechanism::Clear);
            }
        }
    }
    assert!(!payload_leaks(log), "raw value appeared in a cross-party message");
}

#[test]
fn concatenation_messages_are_noise_processed() {
    let ds = dataset(64, 3, 23);
    let mut cfg = config(TrainMode::Concatenation, 15);
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.audit_messages = true;
    let report = fedrd_core::fedrd::run_training(&cfg, &ds, &ds).unwrap();
    let log = &report.message_log;
    for record in &log.records {
        match record.channel {
            Channel::ForwardEmbeddings => {
                assert_eq!(record.mechanism, Mechanism::GaussianNoise);
            }
            Channel::BankMaskedGradients => {
                assert_eq!(record.mechanism, Mechanism::PbmMasked);
            }
            Channel::BackwardPartials | Channel::BankBroadcast => {
                assert_eq!(record.mechanism, Mechanism::Clear);
            }
        }
    }
    assert!(!payload_leaks(log), "raw value appeared in a cross-party message");
    let lines = log.render_lines();
    assert!(lines.contains("mechanism=gaussian"));
    assert!(lines.contains("channel=fwd_embeddings"));
}

#[test]
fn reports_are_identical_across_thread_counts() {
    let ds = dataset(64, 2, 24);
    let mut cfg = config(TrainMode::Summation, 16);
    cfg.epochs = 1;

    let solo = fedrd_core::fedrd::run_training(&cfg, &ds, &ds).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let cfg = cfg.clone();
            let ds = ds.clone();
            std::thread::spawn(move || fedrd_core::fedrd::run_training(&cfg, &ds, &ds).unwrap())
        })
        .collect();
    for handle in handles {
        let report = handle.join().unwrap();
        assert_eq!(report.train_loss, solo.train_loss);
        assert_eq!(report.test_auprc, solo.test_auprc);
        assert_eq!(report.ledger, solo.ledger);
    }
}

#[test]
fn same_bank_transactions_run_with_two_party_masking() {
    let ds = generate(&GenConfig {
        transactions: 48,
        banks: 2,
        accounts_per_bank: 8,
        transaction_dim: 4,
        account_dim: 3,
        positive_rate: 0.25,
        transaction_signal: 1.0,
        account_signal: 1.0,
        allow_same_bank: true,
        seed: 77,
    })
    .unwrap();
    assert!(ds
        .transactions()
        .iter()
        .any(|t| ds.account(t.sender).bank == ds.account(t.receiver).bank));
    let mut cfg = config(TrainMode::Summation, 17);
    cfg.epochs = 1;
    cfg.batch_size = 8;
    let report = fedrd_core::fedrd::run_training(&cfg, &ds, &ds).unwrap();
    assert_eq!(report.iterations, 6);
    assert!(report.train_loss[0].is_finite());
}
