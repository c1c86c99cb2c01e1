//! CSV ingestion and export for the relational dataset.
//!
//! Schemas (headers mandatory, UTF-8, `.` decimal):
//!   transactions.csv: `txn_id,sender_id,receiver_id,label,f0..f{dT-1}`
//!   accounts.csv:     `account_id,bank_id,f0..f{dB-1}`

use std::path::{Path, PathBuf};

use thiserror::Error;

use fedrd_core::data::{AccountRecord, DataError, RelationalDataset, TransactionRecord};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        source: csv::Error,
    },
    #[error("{path}: header mismatch, expected `{expected}`")]
    Header { path: PathBuf, expected: String },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn transaction_header(dim: usize) -> String {
    let mut header = String::from("txn_id,sender_id,receiver_id,label");
    for i in 0..dim {
        header.push_str(&format!(",f{i}"));
    }
    header
}

fn account_header(dim: usize) -> String {
    let mut header = String::from("account_id,bank_id");
    for i in 0..dim {
        header.push_str(&format!(",f{i}"));
    }
    header
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, CsvError> {
    let file = std::fs::File::open(path).map_err(|source| CsvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(
    reader: &mut csv::Reader<std::fs::File>,
    path: &Path,
    fixed: &[&str],
) -> Result<usize, CsvError> {
    let headers = reader.headers().map_err(|source| CsvError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    let fields: Vec<&str> = headers.iter().collect();
    let feature_count = fields.len().saturating_sub(fixed.len());
    let expected: Vec<String> = fixed
        .iter()
        .map(|s| s.to_string())
        .chain((0..feature_count).map(|i| format!("f{i}")))
        .collect();
    if fields.len() <= fixed.len() || fields != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(CsvError::Header {
            path: path.to_path_buf(),
            expected: format!("{},f0..", fixed.join(",")),
        });
    }
    Ok(feature_count)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> Result<f64, CsvError> {
    field.trim().parse::<f64>().map_err(|_| CsvError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("non-numeric {what}: `{field}`"),
    })
}

/// Loads and validates a dataset from the two CSV files.
pub fn load_dataset(
    transactions_path: &Path,
    accounts_path: &Path,
) -> Result<RelationalDataset, CsvError> {
    let mut reader = open_reader(accounts_path)?;
    let account_dim = check_header(&mut reader, accounts_path, &["account_id", "bank_id"])?;
    let mut accounts = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| CsvError::Format {
            path: accounts_path.to_path_buf(),
            source,
        })?;
        let line = record_line(&record);
        if record.len() != account_dim + 2 {
            return Err(CsvError::Parse {
                path: accounts_path.to_path_buf(),
                line,
                message: format!("expected {} fields, got {}", account_dim + 2, record.len()),
            });
        }
        let bank: usize = record[1].trim().parse().map_err(|_| CsvError::Parse {
            path: accounts_path.to_path_buf(),
            line,
            message: format!("non-integer bank_id: `{}`", &record[1]),
        })?;
        let mut features = Vec::with_capacity(account_dim);
        for field in record.iter().skip(2) {
            features.push(parse_f64(accounts_path, line, field, "feature")?);
        }
        accounts.push(AccountRecord {
            id: record[0].to_string(),
            bank,
            features,
        });
    }

    let mut reader = open_reader(transactions_path)?;
    let transaction_dim = check_header(
        &mut reader,
        transactions_path,
        &["txn_id", "sender_id", "receiver_id", "label"],
    )?;
    let mut transactions = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| CsvError::Format {
            path: transactions_path.to_path_buf(),
            source,
        })?;
        let line = record_line(&record);
        if record.len() != transaction_dim + 4 {
            return Err(CsvError::Parse {
                path: transactions_path.to_path_buf(),
                line,
                message: format!(
                    "expected {} fields, got {}",
                    transaction_dim + 4,
                    record.len()
                ),
            });
        }
        let label: u8 = record[3].trim().parse().map_err(|_| CsvError::Parse {
            path: transactions_path.to_path_buf(),
            line,
            message: format!("non-integer label: `{}`", &record[3]),
        })?;
        let mut features = Vec::with_capacity(transaction_dim);
        for field in record.iter().skip(4) {
            features.push(parse_f64(transactions_path, line, field, "feature")?);
        }
        transactions.push(TransactionRecord {
            id: record[0].to_string(),
            sender_id: record[1].to_string(),
            receiver_id: record[2].to_string(),
            features,
            label,
        });
    }

    Ok(RelationalDataset::from_records(accounts, transactions)?)
}

/// Writes a dataset as the two schema CSVs. Floats use the shortest
/// round-trippable representation, so write-then-load is lossless.
pub fn write_dataset(
    ds: &RelationalDataset,
    transactions_path: &Path,
    accounts_path: &Path,
) -> Result<(), CsvError> {
    let mut text = transaction_header(ds.transaction_dim());
    text.push('\n');
    for t in ds.transactions() {
        let sender = &ds.account(t.sender).id;
        let receiver = &ds.account(t.receiver).id;
        text.push_str(&format!("{},{},{},{}", t.id, sender, receiver, t.label));
        for f in &t.features {
            text.push_str(&format!(",{f}"));
        }
        text.push('\n');
    }
    std::fs::write(transactions_path, text).map_err(|source| CsvError::Io {
        path: transactions_path.to_path_buf(),
        source,
    })?;

    let mut text = account_header(ds.account_dim());
    text.push('\n');
    for a in ds.accounts() {
        text.push_str(&format!("{},{}", a.id, a.bank));
        for f in &a.features {
            text.push_str(&format!(",{f}"));
        }
        text.push('\n');
    }
    std::fs::write(accounts_path, text).map_err(|source| CsvError::Io {
        path: accounts_path.to_path_buf(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedrd_core::data::{generate, GenConfig};

    fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, contents).unwrap();
        path
    }

    #[test]
    fn loads_a_hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let accounts = write(
            dir.path(),
            "accounts.csv",
            "account_id,bank_id,f0,f1\na0,1,0.5,-1.5\na1,1,0.25,0.0\na2,2,1.0,2.0\na3,2,-0.5,0.125\n",
        );
        let transactions = write(
            dir.path(),
            "transactions.csv",
            "txn_id,sender_id,receiver_id,label,f0\nt0,a0,a2,1,0.75\nt1,a3,a1,0,-0.25\n",
        );
        let ds = load_dataset(&transactions, &accounts).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.banks(), 2);
        assert_eq!(ds.transaction(0).sender, 0);
        assert_eq!(ds.transaction(0).receiver, 2);
        assert_eq!(ds.account(3).features, vec![-0.5, 0.125]);
    }

    #[test]
    fn unknown_account_reference_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let accounts = write(dir.path(), "accounts.csv", "account_id,bank_id,f0\na0,1,0.0\na1,2,0.0\n");
        let transactions = write(
            dir.path(),
            "transactions.csv",
            "txn_id,sender_id,receiver_id,label,f0\nt0,a0,ghost,0,0.0\n",
        );
        let err = load_dataset(&transactions, &accounts).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("t0"), "{message}");
        assert!(message.contains("ghost"), "{message}");
    }

    #[test]
    fn non_numeric_feature_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let accounts = write(dir.path(), "accounts.csv", "account_id,bank_id,f0\na0,1,0.0\na1,2,0.0\n");
        let transactions = write(
            dir.path(),
            "transactions.csv",
            "txn_id,sender_id,receiver_id,label,f0\nt0,a0,a1,0,0.5\nt1,a1,a0,0,oops\n",
        );
        let err = load_dataset(&transactions, &accounts).unwrap_err();
        match err {
            CsvError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_account_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let accounts = write(
            dir.path(),
            "accounts.csv",
            "account_id,bank_id,f0\na0,1,0.0\na0,2,0.0\n",
        );
        let transactions = write(
            dir.path(),
            "transactions.csv",
            "txn_id,sender_id,receiver_id,label,f0\nt0,a0,a0,0,0.0\n",
        );
        let err = load_dataset(&transactions, &accounts).unwrap_err();
        assert!(err.to_string().contains("duplicate account id"));
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let accounts = write(dir.path(), "accounts.csv", "id,bank,f0\na0,1,0.0\n");
        let transactions = write(
            dir.path(),
            "transactions.csv",
            "txn_id,sender_id,receiver_id,label,f0\n",
        );
        assert!(matches!(
            load_dataset(&transactions, &accounts),
            Err(CsvError::Header { .. })
        ));
    }

    #[test]
    fn generate_write_load_round_trips() {
        let ds = generate(&GenConfig {
            transactions: 200,
            banks: 3,
            accounts_per_bank: 10,
            transaction_dim: 5,
            account_dim: 4,
            positive_rate: 0.1,
            transaction_signal: 1.0,
            account_signal: 1.0,
            allow_same_bank: false,
            seed: 31,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("transactions.csv");
        let a = dir.path().join("accounts.csv");
        write_dataset(&ds, &t, &a).unwrap();
        let loaded = load_dataset(&t, &a).unwrap();
        assert_eq!(ds, loaded);
    }
}
