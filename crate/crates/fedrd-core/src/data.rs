//! Relational dataset model, synthetic generator, bank partitioning, and
//! minibatch sampling.
//!
//! Transactions link a sender and a receiver account; accounts are
//! partitioned across banks. The synthetic generator plants signal on both
//! sides: transaction features carry a label-dependent shift, and labels
//! are drawn from a logistic link over a transaction-side score plus the
//! latent riskiness of both endpoint accounts, so account features stay
//! predictive beyond transaction features alone.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    Integrity(String),
    Parameter(String),
    Generation(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Integrity(msg) => write!(f, "integrity error: {msg}"),
            DataError::Parameter(msg) => write!(f, "invalid parameter: {msg}"),
            DataError::Generation(msg) => write!(f, "generation error: {msg}"),
        }
    }
}

impl core::error::Error for DataError {}

/// One transaction as ingested: endpoint accounts referenced by id.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionRecord {
    pub id: String,
    pub sender_id: String,
    pub receiver_id: String,
    pub features: Vec<f64>,
    pub label: u8,
}

/// One account held by a bank. Bank ids are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountRecord {
    pub id: String,
    pub bank: usize,
    pub features: Vec<f64>,
}

/// A transaction with endpoint account references resolved to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub id: String,
    pub sender: usize,
    pub receiver: usize,
    pub features: Vec<f64>,
    pub label: u8,
}

/// Transactions plus the bank-partitioned account silo.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalDataset {
    accounts: Vec<AccountRecord>,
    transactions: Vec<Transaction>,
    banks: usize,
    transaction_dim: usize,
    account_dim: usize,
    max_account_uses: usize,
}

impl RelationalDataset {
    /// Validates referential integrity and builds the resolved dataset.
    pub fn from_records(
        accounts: Vec<AccountRecord>,
        transactions: Vec<TransactionRecord>,
    ) -> Result<Self, DataError> {
        if accounts.is_empty() {
            return Err(DataError::Integrity(String::from("no accounts")));
        }
        if transactions.is_empty() {
            return Err(DataError::Integrity(String::from("no transactions")));
        }
        let account_dim = accounts[0].features.len();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut banks = 0usize;
        for (i, account) in accounts.iter().enumerate() {
            if index.insert(account.id.as_str(), i).is_some() {
                return Err(DataError::Integrity(alloc::format!(
                    "duplicate account id {}",
                    account.id
                )));
            }
            if account.bank == 0 {
                return Err(DataError::Integrity(alloc::format!(
                    "account {} has bank id 0; bank ids are 1-based",
                    account.id
                )));
            }
            if account.features.len() != account_dim {
                return Err(DataError::Integrity(alloc::format!(
                    "account {} has {} features, expected {}",
                    account.id,
                    account.features.len(),
                    account_dim
                )));
            }
            if account.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Integrity(alloc::format!(
                    "account {} has a non-finite feature",
                    account.id
                )));
            }
            banks = banks.max(account.bank);
        }

        let transaction_dim = transactions[0].features.len();
        let mut resolved = Vec::with_capacity(transactions.len());
        for record in transactions {
            let sender = *index.get(record.sender_id.as_str()).ok_or_else(|| {
                DataError::Integrity(alloc::format!(
                    "transaction {} references unknown sender {}",
                    record.id,
                    record.sender_id
                ))
            })?;
            let receiver = *index.get(record.receiver_id.as_str()).ok_or_else(|| {
                DataError::Integrity(alloc::format!(
                    "transaction {} references unknown receiver {}",
                    record.id,
                    record.receiver_id
                ))
            })?;
            if record.features.len() != transaction_dim {
                return Err(DataError::Integrity(alloc::format!(
                    "transaction {} has {} features, expected {}",
                    record.id,
                    record.features.len(),
                    transaction_dim
                )));
            }
            if record.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Integrity(alloc::format!(
                    "transaction {} has a non-finite feature",
                    record.id
                )));
            }
            if record.label > 1 {
                return Err(DataError::Integrity(alloc::format!(
                    "transaction {} has label {}, expected 0 or 1",
                    record.id,
                    record.label
                )));
            }
            resolved.push(Transaction {
                id: record.id,
                sender,
                receiver,
                features: record.features,
                label: record.label,
            });
        }

        let max_account_uses = count_max_account_uses(&resolved, accounts.len());
        Ok(Self {
            accounts,
            transactions: resolved,
            banks,
            transaction_dim,
            account_dim,
            max_account_uses,
        })
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    pub fn banks(&self) -> usize {
        self.banks
    }

    pub fn transaction_dim(&self) -> usize {
        self.transaction_dim
    }

    pub fn account_dim(&self) -> usize {
        self.account_dim
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    pub fn accounts(&self) -> &[AccountRecord] {
        &self.accounts
    }

    pub fn transaction(&self, idx: usize) -> &Transaction {
        &self.transactions[idx]
    }

    pub fn account(&self, idx: usize) -> &AccountRecord {
        &self.accounts[idx]
    }

    /// Maximum number of transactions any single account participates in,
    /// counting sender and receiver appearances (M_T). Cached at
    /// construction.
    pub fn max_account_uses(&self) -> usize {
        self.max_account_uses
    }

    pub fn positives(&self) -> usize {
        self.transactions.iter().filter(|t| t.label == 1).count()
    }

    /// Splits transactions into train and test; both sides keep the full
    /// account silo. Stratified splitting keeps positive counts
    /// proportional within one.
    pub fn split(
        &self,
        test_fraction: f64,
        stratified: bool,
        seed: u64,
    ) -> Result<(RelationalDataset, RelationalDataset), DataError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DataError::Parameter(alloc::format!(
                "test_fraction must be in (0, 1), got {test_fraction}"
            )));
        }
        let n = self.len();
        let mut rng = StreamRng::from_path(seed, &[stream::SPLIT]);
        let mut test_indices: Vec<usize> = Vec::new();
        if stratified {
            for target_label in [1u8, 0u8] {
                let mut pool: Vec<usize> = (0..n)
                    .filter(|&i| self.transactions[i].label == target_label)
                    .collect();
                rng.shuffle(&mut pool);
                let take = math::round(pool.len() as f64 * test_fraction) as usize;
                test_indices.extend_from_slice(&pool[..take.min(pool.len())]);
            }
        } else {
            let mut pool: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut pool);
            let take = math::round(n as f64 * test_fraction) as usize;
            test_indices.extend_from_slice(&pool[..take.min(n)]);
        }
        let mut in_test = vec![false; n];
        for &i in &test_indices {
            in_test[i] = true;
        }
        let test_count = test_indices.len();
        if test_count == 0 || test_count == n {
            return Err(DataError::Parameter(alloc::format!(
                "degenerate split: {test_count} of {n} transactions on the test side"
            )));
        }

        let pick = |keep_test: bool| -> RelationalDataset {
            let transactions: Vec<Transaction> = self
                .transactions
                .iter()
                .enumerate()
                .filter(|(i, _)| in_test[*i] == keep_test)
                .map(|(_, t)| t.clone())
                .collect();
            let max_account_uses = count_max_account_uses(&transactions, self.accounts.len());
            RelationalDataset {
                accounts: self.accounts.clone(),
                transactions,
                banks: self.banks,
                transaction_dim: self.transaction_dim,
                account_dim: self.account_dim,
                max_account_uses,
            }
        };
        Ok((pick(false), pick(true)))
    }
}

/// Brute-force M_T: sender plus receiver appearances per account, maximized.
pub fn compute_mt(ds: &RelationalDataset) -> usize {
    count_max_account_uses(ds.transactions(), ds.accounts().len())
}

fn count_max_account_uses(transactions: &[Transaction], accounts: usize) -> usize {
    let mut uses = vec![0usize; accounts];
    for t in transactions {
        uses[t.sender] += 1;
        uses[t.receiver] += 1;
    }
    uses.into_iter().max().unwrap_or(0)
}

/// Per-column standardization statistics, computed on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub transaction_mean: Vec<f64>,
    pub transaction_std: Vec<f64>,
    pub account_mean: Vec<f64>,
    pub account_std: Vec<f64>,
}

fn column_mean_std(rows: &[&Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; dim];
    for row in rows {
        for ((s, v), m) in std.iter_mut().zip(row.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        let var = *s / n;
        // Near-constant columns only get centered.
        *s = if var > 1e-24 { math::sqrt(var) } else { 1.0 };
    }
    (mean, std)
}

/// Computes per-column means and standard deviations (population) over the
/// dataset's transactions and its full account silo.
pub fn feature_stats(ds: &RelationalDataset) -> FeatureStats {
    let txn_rows: Vec<&Vec<f64>> = ds.transactions().iter().map(|t| &t.features).collect();
    let acct_rows: Vec<&Vec<f64>> = ds.accounts().iter().map(|a| &a.features).collect();
    let (transaction_mean, transaction_std) = column_mean_std(&txn_rows, ds.transaction_dim());
    let (account_mean, account_std) = column_mean_std(&acct_rows, ds.account_dim());
    FeatureStats {
        transaction_mean,
        transaction_std,
        account_mean,
        account_std,
    }
}

/// Applies standardization in place using the given (train) statistics.
pub fn standardize(ds: &mut RelationalDataset, stats: &FeatureStats) {
    for t in &mut ds.transactions {
        for ((v, m), s) in t
            .features
            .iter_mut()
            .zip(&stats.transaction_mean)
            .zip(&stats.transaction_std)
        {
            *v = (*v - m) / s;
        }
    }
    for a in &mut ds.accounts {
        for ((v, m), s) in a
            .features
            .iter_mut()
            .zip(&stats.account_mean)
            .zip(&stats.account_std)
        {
            *v = (*v - m) / s;
        }
    }
}

/// Shuffled epoch order over transaction indices; batches are consecutive
/// chunks, so each transaction appears exactly once per epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(n: usize, rng: &mut StreamRng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, cursor: 0 }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Option<&[usize]> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = &self.order[self.cursor..end];
        self.cursor = end;
        Some(batch)
    }

    pub fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
        n.div_ceil(batch_size) as u64
    }
}

/// Draws one minibatch uniformly without replacement.
pub fn sample_minibatch(
    ds: &RelationalDataset,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>, DataError> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(DataError::Parameter(alloc::format!(
            "batch size {batch_size} not in 1..={}",
            ds.len()
        )));
    }
    let mut sampler = EpochSampler::new(ds.len(), rng);
    Ok(sampler.next_batch(batch_size).unwrap_or(&[]).to_vec())
}

/// Synthetic generator configuration (SWIFT/AMLSim-shaped at desk scale).
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub transactions: usize,
    pub banks: usize,
    pub accounts_per_bank: usize,
    pub transaction_dim: usize,
    pub account_dim: usize,
    /// Fraction of anomalous transactions, in (0, 1).
    pub positive_rate: f64,
    /// Strength of the transaction-side score and label shift.
    pub transaction_signal: f64,
    /// Strength of the account-riskiness contribution to labels.
    pub account_signal: f64,
    /// Permit sender and receiver at the same bank (off by default).
    pub allow_same_bank: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            transactions: 20_000,
            banks: 4,
            accounts_per_bank: 500,
            transaction_dim: 8,
            account_dim: 6,
            positive_rate: 0.01,
            transaction_signal: 1.0,
            account_signal: 1.5,
            allow_same_bank: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.transactions == 0 {
            return Err(DataError::Generation(String::from("transactions must be positive")));
        }
        if self.banks == 0 || self.accounts_per_bank == 0 {
            return Err(DataError::Generation(String::from(
                "need at least one bank with at least one account",
            )));
        }
        if self.banks < 2 && !self.allow_same_bank {
            return Err(DataError::Generation(String::from(
                "distinct sender and receiver banks need at least 2 banks",
            )));
        }
        if self.transaction_dim == 0 || self.account_dim == 0 {
            return Err(DataError::Generation(String::from("feature dims must be positive")));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(DataError::Generation(alloc::format!(
                "positive_rate must be in (0, 1), got {}",
                self.positive_rate
            )));
        }
        if self.positive_rate * (self.transactions as f64) < 1.0 {
            return Err(DataError::Generation(String::from(
                "positive_rate times transactions is below one positive",
            )));
        }
        if self.transaction_signal < 0.0 || self.account_signal < 0.0 {
            return Err(DataError::Generation(String::from("signal strengths must be >= 0")));
        }
        Ok(())
    }
}

mod stream {
    pub const ACCOUNT_FEATURES: u64 = 1;
    pub const DIRECTIONS: u64 = 2;
    pub const ENDPOINTS: u64 = 3;
    pub const TXN_FEATURES: u64 = 4;
    pub const LABELS: u64 = 5;
    pub const SPLIT: u64 = 6;
}

fn unit_vector(dim: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = math::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 1e-12 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generates a dataset deterministically from the config seed.
///
/// Process: account features are standard normal with a latent riskiness
/// `r_a = w_B . x_a`; endpoint banks and accounts are drawn uniformly (a
/// same-bank pair only when allowed); base transaction features are standard
/// normal with score `u_t = w_T . z_t`; labels come from
/// `sigmoid(s_T u_t + s_B (r_sender + r_receiver) + c)` with `c` calibrated
/// so the expected positive count hits the configured rate, then boundary
/// flips pin the realized count to the target exactly; finally positives get
/// a feature shift `s_T w_T` so transaction features carry direct signal.
pub fn generate(cfg: &GenConfig) -> Result<RelationalDataset, DataError> {
    cfg.validate()?;
    let seed = cfg.seed;

    let mut accounts = Vec::with_capacity(cfg.banks * cfg.accounts_per_bank);
    for bank in 1..=cfg.banks {
        for slot in 0..cfg.accounts_per_bank {
            let idx = (bank - 1) * cfg.accounts_per_bank + slot;
            let mut rng = StreamRng::from_path(seed, &[stream::ACCOUNT_FEATURES, idx as u64]);
            let features: Vec<f64> = (0..cfg.account_dim).map(|_| rng.normal()).collect();
            accounts.push(AccountRecord {
                id: alloc::format!("a{idx:06}"),
                bank,
                features,
            });
        }
    }

    let mut dir_rng = StreamRng::from_path(seed, &[stream::DIRECTIONS]);
    let account_direction = unit_vector(cfg.account_dim, &mut dir_rng);
    let transaction_direction = unit_vector(cfg.transaction_dim, &mut dir_rng);
    let riskiness: Vec<f64> = accounts
        .iter()
        .map(|a| dot(&account_direction, &a.features))
        .collect();

    let n = cfg.transactions;
    let mut senders = Vec::with_capacity(n);
    let mut receivers = Vec::with_capacity(n);
    let mut base_features = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for t in 0..n {
        let mut rng = StreamRng::from_path(seed, &[stream::ENDPOINTS, t as u64]);
        let sender_bank = rng.next_below(cfg.banks as u64) as usize;
        let receiver_bank = if cfg.allow_same_bank {
            rng.next_below(cfg.banks as u64) as usize
        } else {
            let r = rng.next_below(cfg.banks as u64 - 1) as usize;
            if r >= sender_bank {
                r + 1
            } else {
                r
            }
        };
        let pick = |bank: usize, rng: &mut StreamRng| {
            bank * cfg.accounts_per_bank + rng.next_below(cfg.accounts_per_bank as u64) as usize
        };
        let sender = pick(sender_bank, &mut rng);
        let receiver = pick(receiver_bank, &mut rng);

        let mut feat_rng = StreamRng::from_path(seed, &[stream::TXN_FEATURES, t as u64]);
        let z: Vec<f64> = (0..cfg.transaction_dim).map(|_| feat_rng.normal()).collect();
        let score = cfg.transaction_signal * dot(&transaction_direction, &z)
            + cfg.account_signal * (riskiness[sender] + riskiness[receiver]);

        senders.push(sender);
        receivers.push(receiver);
        base_features.push(z);
        scores.push(score);
    }

    // Calibrate the logistic intercept so expected positives hit the target.
    let target = math::round(cfg.positive_rate * n as f64).max(1.0) as usize;
    let expected_at = |c: f64| -> f64 { scores.iter().map(|&s| math::sigmoid(s + c)).sum() };
    let (mut lo, mut hi) = (-80.0f64, 80.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_at(mid) < target as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let intercept = 0.5 * (lo + hi);

    let mut label_rng = StreamRng::from_path(seed, &[stream::LABELS]);
    let probs: Vec<f64> = scores.iter().map(|&s| math::sigmoid(s + intercept)).collect();
    let mut labels: Vec<u8> = probs.iter().map(|&p| u8::from(label_rng.bernoulli(p))).collect();

    // Boundary flips: adjust the realized count to the target exactly,
    // flipping the samples closest to the decision boundary first.
    let mut count = labels.iter().filter(|&&l| l == 1).count();
    let mut by_prob: Vec<usize> = (0..n).collect();
    by_prob.sort_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap().then(a.cmp(&b)));
    if count > target {
        for &i in by_prob.iter() {
            if count == target {
                break;
            }
            if labels[i] == 1 {
                labels[i] = 0;
                count -= 1;
            }
        }
    } else if count < target {
        for &i in by_prob.iter().rev() {
            if count == target {
                break;
            }
            if labels[i] == 0 {
                labels[i] = 1;
                count += 1;
            }
        }
    }

    let mut transactions = Vec::with_capacity(n);
    for t in 0..n {
        let mut features = base_features[t].clone();
        if labels[t] == 1 {
            for (f, d) in features.iter_mut().zip(&transaction_direction) {
                *f += cfg.transaction_signal * d;
            }
        }
        transactions.push(TransactionRecord {
            id: alloc::format!("t{t:06}"),
            sender_id: accounts[senders[t]].id.clone(),
            receiver_id: accounts[receivers[t]].id.clone(),
            features,
            label: labels[t],
        });
    }

    RelationalDataset::from_records(accounts, transactions)
}
