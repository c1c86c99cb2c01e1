//! Renyi-DP budget estimator for a full training configuration.
//!
//! Reports per-order budgets for the transaction feature set and the bank
//! account feature set under either sharing approach. The composition
//! follows the counting argument over expected record appearances
//! (`Q*B/N` for a transaction, `Q*B*M_T/N` for an account) with asymptotic
//! constants set to 1; the Poisson-Binomial constant is exposed as a knob
//! and echoed in every report. The output is an estimator, not a certified
//! bound.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub enum AccountantError {
    Parameter(String),
}

impl fmt::Display for AccountantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccountantError::Parameter(msg) => write!(f, "invalid accountant input: {msg}"),
        }
    }
}

impl core::error::Error for AccountantError {}

/// Forward-sharing approach whose budget is being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Approach {
    /// Gaussian-perturbed embeddings, concatenated at the active party.
    Concatenation,
    /// PBM-quantized embeddings, securely summed at the active party.
    Summation,
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Approach::Concatenation => write!(f, "concatenation"),
            Approach::Summation => write!(f, "summation"),
        }
    }
}

/// Everything the estimator needs about a training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetInputs {
    pub approach: Approach,
    /// Total iterations Q.
    pub iterations: u64,
    /// Training-set size N.
    pub dataset_size: u64,
    /// Minibatch size B.
    pub batch_size: u64,
    /// Embedding length P.
    pub embedding_dim: u64,
    /// Maximum transactions any single account participates in (M_T).
    pub max_account_uses: u64,
    /// Bank count K.
    pub banks: u64,
    /// Account-model parameter count.
    pub account_params: u64,
    /// Renyi orders, each in (1, 2].
    pub alphas: Vec<f64>,
    /// Gaussian noise variance (concatenation forward sharing).
    pub sigma2: f64,
    /// PBM bins/slope for forward embedding sharing (summation).
    pub fwd_bins: u32,
    pub fwd_slope: f64,
    /// PBM bins/slope for bank gradient averaging (both approaches).
    pub bank_bins: u32,
    pub bank_slope: f64,
    /// Asymptotic-constant knob on PBM terms; default 1.
    pub pbm_constant: f64,
}

impl BudgetInputs {
    pub fn validate(&self) -> Result<(), AccountantError> {
        let positives: [(&str, u64); 7] = [
            ("iterations", self.iterations),
            ("dataset_size", self.dataset_size),
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("max_account_uses", self.max_account_uses),
            ("banks", self.banks),
            ("account_params", self.account_params),
        ];
        for (name, value) in positives {
            if value == 0 {
                return Err(AccountantError::Parameter(alloc::format!(
                    "{name} must be positive"
                )));
            }
        }
        if self.batch_size > self.dataset_size {
            return Err(AccountantError::Parameter(alloc::format!(
                "batch_size {} exceeds dataset_size {}",
                self.batch_size,
                self.dataset_size
            )));
        }
        if self.banks < 2 {
            return Err(AccountantError::Parameter(String::from(
                "gradient averaging needs at least 2 banks",
            )));
        }
        if self.alphas.is_empty() {
            return Err(AccountantError::Parameter(String::from("no alpha orders")));
        }
        for &alpha in &self.alphas {
            if !(alpha > 1.0 && alpha <= 2.0) {
                return Err(AccountantError::Parameter(alloc::format!(
                    "alpha must be in (1, 2], got {alpha}"
                )));
            }
        }
        for (name, slope) in [("fwd_slope", self.fwd_slope), ("bank_slope", self.bank_slope)] {
            if !(0.0..=0.25).contains(&slope) {
                return Err(AccountantError::Parameter(alloc::format!(
                    "{name} must be in [0, 1/4], got {slope}"
                )));
            }
        }
        if self.approach == Approach::Concatenation && !(self.sigma2 > 0.0) {
            return Err(AccountantError::Parameter(alloc::format!(
                "sigma2 must be positive for concatenation, got {}",
                self.sigma2
            )));
        }
        if !(self.pbm_constant > 0.0) {
            return Err(AccountantError::Parameter(alloc::format!(
                "pbm_constant must be positive, got {}",
                self.pbm_constant
            )));
        }
        Ok(())
    }
}

/// Budgets and constituent terms at one Renyi order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetRow {
    pub alpha: f64,
    /// Budget for transaction features.
    pub eps_transactions: f64,
    /// Budget for bank account features.
    pub eps_accounts: f64,
    /// Embedding-sharing term (a transaction's forward/backward exposure).
    pub term_embedding: f64,
    /// Account-embedding term (an account's forward/backward exposure).
    pub term_account: f64,
    /// Gradient-averaging term (bank descent-step aggregation).
    pub term_gradient: f64,
}

/// Per-order budget report; an estimator whose asymptotic constants are 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyReport {
    pub approach: Approach,
    pub rows: Vec<BudgetRow>,
    /// Whether `N > 2 |theta_B| b' beta'^2 / (M_T P b beta^2)` holds; only
    /// meaningful for the summation approach.
    pub theorem2_threshold_holds: Option<bool>,
    pub pbm_constant: f64,
}

impl PrivacyReport {
    /// Flat key-value text block, one `key=value` per line.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "approach={}", self.approach);
        let _ = writeln!(out, "pbm_constant={}", self.pbm_constant);
        let _ = writeln!(out, "kind=estimator (asymptotic constants set to 1)");
        match self.theorem2_threshold_holds {
            Some(holds) => {
                let _ = writeln!(out, "forward_term_dominance_threshold_holds={holds}");
            }
            None => {
                let _ = writeln!(out, "forward_term_dominance_threshold_holds=n/a");
            }
        }
        for row in &self.rows {
            let _ = writeln!(
                out,
                "alpha={} eps_transactions={} eps_accounts={} term_embedding={} term_account={} term_gradient={}",
                row.alpha,
                row.eps_transactions,
                row.eps_accounts,
                row.term_embedding,
                row.term_account,
                row.term_gradient
            );
        }
        out
    }

    /// Machine-readable CSV rows (with header) for experiment outputs.
    pub fn render_csv(&self) -> String {
        let mut out = String::from(
            "alpha,eps_transactions,eps_accounts,term_embedding,term_account,term_gradient\n",
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.alpha,
                row.eps_transactions,
                row.eps_accounts,
                row.term_embedding,
                row.term_account,
                row.term_gradient
            );
        }
        out
    }
}

/// Local RDP of one Gaussian-perturbed embedding: `P * alpha / sigma2`.
pub fn gaussian_embedding_rdp(
    alpha: f64,
    embedding_dim: u64,
    sigma2: f64,
) -> Result<f64, AccountantError> {
    if !(sigma2 > 0.0) {
        return Err(AccountantError::Parameter(alloc::format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    Ok(embedding_dim as f64 * alpha / sigma2)
}

/// RDP of one PBM sum step over `parties` inputs:
/// `constant * bins * slope^2 * alpha / (parties - 1)`.
pub fn pbm_step_rdp(
    alpha: f64,
    bins: u32,
    slope: f64,
    parties: u64,
    constant: f64,
) -> Result<f64, AccountantError> {
    if parties < 2 {
        return Err(AccountantError::Parameter(alloc::format!(
            "pbm step needs at least 2 parties, got {parties}"
        )));
    }
    Ok(constant * bins as f64 * slope * slope * alpha / (parties - 1) as f64)
}

/// Parties in the forward-embedding secure sum: transaction, sender bank,
/// receiver bank.
pub const FORWARD_SUM_PARTIES: u64 = 3;

/// Full budget report for a training configuration.
pub fn budget_report(inputs: &BudgetInputs) -> Result<PrivacyReport, AccountantError> {
    inputs.validate()?;
    let q = inputs.iterations as f64;
    let n = inputs.dataset_size as f64;
    let b = inputs.batch_size as f64;
    let p = inputs.embedding_dim as f64;
    let mt = inputs.max_account_uses as f64;
    let theta_b = inputs.account_params as f64;
    let transaction_rate = q * b / n;
    let account_rate = q * b * mt / n;

    // The summation-approach dominance condition from the analysis:
    // N > 2 |theta_B| b' beta'^2 / (M_T P b beta^2).
    let theorem2_threshold_holds = match inputs.approach {
        Approach::Summation => {
            let fwd_scale = mt * p * inputs.fwd_bins as f64 * inputs.fwd_slope * inputs.fwd_slope;
            if fwd_scale > 0.0 {
                let bound = 2.0
                    * theta_b
                    * inputs.bank_bins as f64
                    * inputs.bank_slope
                    * inputs.bank_slope
                    / fwd_scale;
                Some(n > bound)
            } else {
                Some(false)
            }
        }
        Approach::Concatenation => None,
    };

    let mut rows = Vec::with_capacity(inputs.alphas.len());
    for &alpha in &inputs.alphas {
        let term_gradient = q * (b / n) * (b / n)
            * theta_b
            * pbm_step_rdp(
                alpha,
                inputs.bank_bins,
                inputs.bank_slope,
                inputs.banks,
                inputs.pbm_constant,
            )?;

        let (term_embedding, term_account) = match inputs.approach {
            Approach::Concatenation => {
                // Per-appearance budget P * alpha / sigma2; the stated
                // transaction bound carries M_T as well.
                let per_use = gaussian_embedding_rdp(alpha, inputs.embedding_dim, inputs.sigma2)?;
                let shared = transaction_rate * mt * per_use;
                (shared, shared)
            }
            Approach::Summation => {
                let per_use = p
                    * pbm_step_rdp(
                        alpha,
                        inputs.fwd_bins,
                        inputs.fwd_slope,
                        FORWARD_SUM_PARTIES,
                        inputs.pbm_constant,
                    )?;
                (transaction_rate * per_use, account_rate * per_use)
            }
        };

        let eps_accounts = match inputs.approach {
            Approach::Concatenation => term_account.max(term_gradient),
            Approach::Summation => {
                if theorem2_threshold_holds == Some(true) {
                    term_account
                } else {
                    term_account.max(term_gradient)
                }
            }
        };

        rows.push(BudgetRow {
            alpha,
            eps_transactions: term_embedding,
            eps_accounts,
            term_embedding,
            term_account,
            term_gradient,
        });
    }

    Ok(PrivacyReport {
        approach: inputs.approach,
        rows,
        theorem2_threshold_holds,
        pbm_constant: inputs.pbm_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn base_inputs(approach: Approach) -> BudgetInputs {
        BudgetInputs {
            approach,
            iterations: 100,
            dataset_size: 6400,
            batch_size: 64,
            embedding_dim: 64,
            max_account_uses: 8,
            banks: 4,
            account_params: 1000,
            alphas: vec![2.0],
            sigma2: 1.0,
            fwd_bins: 64,
            fwd_slope: 0.25,
            bank_bins: 1024,
            bank_slope: 0.25,
            pbm_constant: 1.0,
        }
    }

    #[test]
    fn gaussian_embedding_formula() {
        assert_eq!(gaussian_embedding_rdp(2.0, 1, 2.0).unwrap(), 1.0);
        // Linear in P.
        let one = gaussian_embedding_rdp(1.5, 16, 0.7).unwrap();
        let two = gaussian_embedding_rdp(1.5, 32, 0.7).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
        // Infinite noise drives the budget to zero.
        assert!(gaussian_embedding_rdp(2.0, 64, 1e18).unwrap() < 1e-12);
        assert!(gaussian_embedding_rdp(2.0, 1, 0.0).is_err());
    }

    #[test]
    fn pbm_step_formula() {
        // 64 * 0.0625 * 2 / 2 = 4.
        assert_eq!(pbm_step_rdp(2.0, 64, 0.25, 3, 1.0).unwrap(), 4.0);
        // Crowd effect: many parties drive the budget to zero.
        assert!(pbm_step_rdp(2.0, 64, 0.25, 1_000_000, 1.0).unwrap() < 1e-2);
        // No signal encoded, no privacy spent.
        assert_eq!(pbm_step_rdp(2.0, 64, 0.0, 3, 1.0).unwrap(), 0.0);
        assert!(pbm_step_rdp(2.0, 64, 0.25, 1, 1.0).is_err());
    }

    #[test]
    fn summation_one_epoch_matches_hand_evaluation() {
        // Q = N/B (one epoch) so QB/N = 1; eps_T = P * b * beta^2 * alpha / 2.
        let mut inputs = base_inputs(Approach::Summation);
        inputs.iterations = inputs.dataset_size / inputs.batch_size;
        let report = budget_report(&inputs).unwrap();
        let row = &report.rows[0];
        assert!((row.eps_transactions - 256.0).abs() < 1e-9, "{}", row.eps_transactions);
    }

    #[test]
    fn concatenation_with_equalized_sigma() {
        // sigma2 = 4 / (b beta^2) = 1 at b = 64, beta = 0.25; the embedding
        // term is then Q P B M_T alpha / N.
        let mut inputs = base_inputs(Approach::Concatenation);
        inputs.sigma2 = 4.0 / (64.0 * 0.25 * 0.25);
        assert!((inputs.sigma2 - 1.0).abs() < 1e-12);
        let report = budget_report(&inputs).unwrap();
        let row = &report.rows[0];
        let expected = 100.0 * 64.0 * 64.0 * 8.0 * 2.0 / (6400.0 * 1.0);
        assert!((row.term_embedding - expected).abs() < 1e-9);
        assert_eq!(row.eps_transactions, row.term_embedding);
        assert!(row.eps_accounts >= row.term_embedding);
    }

    #[test]
    fn doubling_iterations_doubles_every_term() {
        for approach in [Approach::Concatenation, Approach::Summation] {
            let inputs = base_inputs(approach);
            let mut doubled = inputs.clone();
            doubled.iterations *= 2;
            let r1 = budget_report(&inputs).unwrap();
            let r2 = budget_report(&doubled).unwrap();
            for (a, b) in r1.rows.iter().zip(&r2.rows) {
                assert!((b.term_embedding - 2.0 * a.term_embedding).abs() < 1e-9);
                assert!((b.term_account - 2.0 * a.term_account).abs() < 1e-9);
                assert!((b.term_gradient - 2.0 * a.term_gradient).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn budgets_are_monotone_in_the_stated_directions() {
        let probe = |mutate: &dyn Fn(&mut BudgetInputs)| -> (BudgetRow, BudgetRow) {
            let base = base_inputs(Approach::Summation);
            let mut more = base.clone();
            mutate(&mut more);
            (
                budget_report(&base).unwrap().rows[0],
                budget_report(&more).unwrap().rows[0],
            )
        };
        let nondecreasing = |pair: (BudgetRow, BudgetRow)| {
            assert!(pair.1.term_embedding >= pair.0.term_embedding);
            assert!(pair.1.term_account >= pair.0.term_account);
            assert!(pair.1.term_gradient >= pair.0.term_gradient);
        };
        nondecreasing(probe(&|i| i.iterations *= 3));
        nondecreasing(probe(&|i| i.batch_size *= 2));
        nondecreasing(probe(&|i| i.embedding_dim *= 2));
        nondecreasing(probe(&|i| i.alphas = vec![2.0]));
        nondecreasing(probe(&|i| {
            i.fwd_bins *= 2;
            i.bank_bins *= 2;
        }));
        nondecreasing(probe(&|i| {
            i.fwd_slope = 0.25;
            i.bank_slope = 0.25;
        }));
        nondecreasing(probe(&|i| i.max_account_uses += 5));
        // Nonincreasing directions.
        let (base, more_n) = probe(&|i| i.dataset_size *= 4);
        assert!(more_n.term_embedding <= base.term_embedding);
        assert!(more_n.term_gradient <= base.term_gradient);
        let (base, more_k) = probe(&|i| i.banks *= 2);
        assert!(more_k.term_gradient <= base.term_gradient);
        // Gaussian side: more noise, smaller budget.
        let conc = base_inputs(Approach::Concatenation);
        let mut noisier = conc.clone();
        noisier.sigma2 *= 10.0;
        assert!(
            budget_report(&noisier).unwrap().rows[0].term_embedding
                <= budget_report(&conc).unwrap().rows[0].term_embedding
        );
    }

    #[test]
    fn account_budget_dominates_embedding_term() {
        for approach in [Approach::Concatenation, Approach::Summation] {
            let report = budget_report(&base_inputs(approach)).unwrap();
            for row in &report.rows {
                assert!(row.eps_accounts >= row.term_embedding);
            }
        }
    }

    #[test]
    fn threshold_flag_controls_account_budget() {
        // Large N: forward/backward term dominates and is reported alone.
        let mut large_n = base_inputs(Approach::Summation);
        large_n.dataset_size = 1_000_000;
        large_n.iterations = 1000;
        let report = budget_report(&large_n).unwrap();
        assert_eq!(report.theorem2_threshold_holds, Some(true));
        let row = &report.rows[0];
        assert!(row.term_account > row.term_gradient);
        assert_eq!(row.eps_accounts, row.term_account);

        // Tiny N with a huge account model: the threshold fails and the
        // max of both terms is reported.
        let mut small_n = base_inputs(Approach::Summation);
        small_n.dataset_size = 64;
        small_n.batch_size = 64;
        small_n.account_params = 50_000_000;
        let report = budget_report(&small_n).unwrap();
        assert_eq!(report.theorem2_threshold_holds, Some(false));
        let row = &report.rows[0];
        assert_eq!(row.eps_accounts, row.term_account.max(row.term_gradient));
        assert!(row.term_gradient > row.term_account);
    }

    #[test]
    fn reports_are_reproducible() {
        let inputs = base_inputs(Approach::Summation);
        assert_eq!(budget_report(&inputs).unwrap(), budget_report(&inputs).unwrap());
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let mut inputs = base_inputs(Approach::Summation);
        inputs.alphas = vec![2.5];
        assert!(budget_report(&inputs).is_err());
        let mut inputs = base_inputs(Approach::Summation);
        inputs.batch_size = inputs.dataset_size + 1;
        assert!(budget_report(&inputs).is_err());
        let mut inputs = base_inputs(Approach::Concatenation);
        inputs.sigma2 = 0.0;
        assert!(budget_report(&inputs).is_err());
        let mut inputs = base_inputs(Approach::Summation);
        inputs.banks = 1;
        assert!(budget_report(&inputs).is_err());
    }

    #[test]
    fn text_rendering_contains_all_rows() {
        let mut inputs = base_inputs(Approach::Summation);
        inputs.alphas = vec![1.5, 2.0];
        let report = budget_report(&inputs).unwrap();
        let text = report.render_text();
        assert!(text.contains("approach=summation"));
        assert!(text.contains("alpha=1.5"));
        assert!(text.contains("alpha=2"));
        let csv = report.render_csv();
        assert_eq!(csv.lines().count(), 3);
    }
}
