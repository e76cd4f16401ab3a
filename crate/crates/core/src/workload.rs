//! Transaction workloads: CSV trace ingestion (plain or gzip) and seeded
//! synthetic generation with uniform or Zipf popularity and optional
//! community structure.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{Digest, Encoder};
use crate::ledger::{Address, Tokens};

pub const TRACE_COLUMNS: [&str; 4] = ["timestamp_ms", "from_hex", "to_hex", "value"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadTx {
    /// 1-based position in the ordered workload.
    pub id: u64,
    pub timestamp_ms: u64,
    pub from: Address,
    pub to: Address,
    pub value: Tokens,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("missing column {0}")]
    MissingColumn(&'static str),
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Popularity {
    Uniform,
    Zipf { exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Community {
    pub n_clusters: usize,
    /// Probability that the payee is drawn from the payer's cluster.
    pub intra_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkloadSource {
    CsvTrace {
        path: String,
    },
    Synthetic {
        n_accounts: usize,
        n_txs: usize,
        popularity: Popularity,
        #[serde(default)]
        community: Option<Community>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub source: WorkloadSource,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.into()));
        if let WorkloadSource::Synthetic {
            n_accounts,
            popularity,
            community,
            ..
        } = &self.source
        {
            if *n_accounts < 2 {
                return bad("n_accounts must be at least 2");
            }
            if let Popularity::Zipf { exponent } = popularity {
                if exponent.is_nan() || *exponent <= 0.0 {
                    return bad("Zipf exponent must be positive");
                }
            }
            if let Some(c) = community {
                if c.n_clusters == 0 || c.n_clusters > *n_accounts {
                    return bad("n_clusters must be in 1..=n_accounts");
                }
                if !(0.0..=1.0).contains(&c.intra_prob) {
                    return bad("intra_prob must be in [0, 1]");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceLoad {
    pub txs: Vec<WorkloadTx>,
    /// Rows with an empty `to` field.
    pub skipped_contract_creations: usize,
}

/// Parses trace CSV text. Rows are stably sorted by timestamp and renumbered.
pub fn parse_csv_trace<R: Read>(input: R) -> Result<TraceLoad, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| WorkloadError::Parse {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(TRACE_COLUMNS) {
        *slot = headers.iter().position(|h| h == name).ok_or(WorkloadError::MissingColumn(name))?;
    }

    let mut load = TraceLoad::default();
    for record in reader.records() {
        let record = record.map_err(|e| WorkloadError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |reason: String| WorkloadError::Parse { line, reason };
        let field = |i: usize| record.get(cols[i]).ok_or_else(|| err(format!("missing {}", TRACE_COLUMNS[i])));
        let timestamp_ms: u64 = field(0)?.parse().map_err(|e| err(format!("timestamp: {e}")))?;
        let from = Address::from_hex(field(1)?).map_err(|e| err(format!("from: {e}")))?;
        let to_text = field(2)?;
        if to_text.is_empty() {
            load.skipped_contract_creations += 1;
            continue;
        }
        let to = Address::from_hex(to_text).map_err(|e| err(format!("to: {e}")))?;
        let value: Tokens = field(3)?.parse().map_err(|e| err(format!("value: {e}")))?;
        load.txs.push(WorkloadTx {
            id: 0,
            timestamp_ms,
            from,
            to,
            value,
        });
    }
    load.txs.sort_by_key(|t| t.timestamp_ms);
    for (i, tx) in load.txs.iter_mut().enumerate() {
        tx.id = i as u64 + 1;
    }
    Ok(load)
}

/// Loads a trace file; gzip input is detected by its magic bytes.
pub fn load_csv_trace(path: impl AsRef<Path>) -> Result<TraceLoad, WorkloadError> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let head = std::io::Cursor::new(magic[..n].to_vec()).chain(file);
    if n == 2 && magic == [0x1f, 0x8b] {
        parse_csv_trace(GzDecoder::new(head))
    } else {
        parse_csv_trace(head)
    }
}

pub fn write_csv_trace<W: Write>(txs: &[WorkloadTx], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for tx in txs {
        w.write_record([
            tx.timestamp_ms.to_string(),
            tx.from.to_hex(),
            tx.to.to_hex(),
            tx.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn account_address(index: usize) -> Address {
    Address::derived("brokershard/account", index as u64)
}

/// Draws account ranks (0-based) according to a popularity law.
enum RankSampler {
    Uniform(usize),
    Zipf(Zipf<f64>),
}

impl RankSampler {
    fn new(n: usize, popularity: Popularity) -> Self {
        match popularity {
            Popularity::Uniform => RankSampler::Uniform(n),
            Popularity::Zipf { exponent } => {
                RankSampler::Zipf(Zipf::new(n as f64, exponent).expect("validated exponent and size"))
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            RankSampler::Uniform(n) => rng.random_range(0..*n),
            RankSampler::Zipf(z) => z.sample(rng) as usize - 1,
        }
    }
}

/// Seeded synthetic workload. Account `i` has popularity rank `i`; with a
/// community model, account `i` belongs to cluster `i mod n_clusters`, so
/// every cluster gets its share of hot accounts.
pub fn generate_synthetic(spec: &WorkloadSpec) -> Result<Vec<WorkloadTx>, WorkloadError> {
    spec.validate()?;
    let WorkloadSource::Synthetic {
        n_accounts,
        n_txs,
        popularity,
        community,
    } = &spec.source
    else {
        return Err(WorkloadError::InvalidSpec("not a synthetic source".into()));
    };
    let n = *n_accounts;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let global = RankSampler::new(n, *popularity);
    let clusters: Vec<(usize, RankSampler)> = community
        .map(|c| {
            (0..c.n_clusters)
                .map(|k| {
                    let size = (n - k).div_ceil(c.n_clusters);
                    (size, RankSampler::new(size, *popularity))
                })
                .collect()
        })
        .unwrap_or_default();
    let addrs: Vec<Address> = (0..n).map(account_address).collect();

    let mut txs = Vec::with_capacity(*n_txs);
    for i in 0..*n_txs {
        let payer = global.sample(&mut rng);
        let mut payee = payer;
        for _ in 0..8 {
            payee = match community {
                Some(c) if rng.random_bool(c.intra_prob) => {
                    let k = payer % c.n_clusters;
                    k + clusters[k].1.sample(&mut rng) * c.n_clusters
                }
                _ => global.sample(&mut rng),
            };
            if payee != payer {
                break;
            }
        }
        txs.push(WorkloadTx {
            id: i as u64 + 1,
            timestamp_ms: i as u64,
            from: addrs[payer],
            to: addrs[payee],
            value: rng.random_range(1..=100),
        });
    }
    Ok(txs)
}

pub fn load_workload(spec: &WorkloadSpec) -> Result<Vec<WorkloadTx>, WorkloadError> {
    match &spec.source {
        WorkloadSource::CsvTrace { path } => Ok(load_csv_trace(path)?.txs),
        WorkloadSource::Synthetic { .. } => generate_synthetic(spec),
    }
}

/// Digest identifying a workload's exact content and order.
pub fn workload_digest(txs: &[WorkloadTx]) -> Digest {
    let mut enc = Encoder::new();
    for tx in txs {
        enc.u64(tx.id).u64(tx.timestamp_ms).bytes(&tx.from.0).bytes(&tx.to.0).u128(tx.value);
    }
    Digest::hash(&enc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn synthetic(n_accounts: usize, n_txs: usize, popularity: Popularity, community: Option<Community>, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            source: WorkloadSource::Synthetic {
                n_accounts,
                n_txs,
                popularity,
                community,
            },
            seed,
        }
    }

    #[test]
    fn three_row_fixture_in_order() {
        let text = "timestamp_ms,from_hex,to_hex,value\n30,0x01,0x02,5\n10,0x03,0x04,6\n20,0x05,0x06,7\n";
        let load = parse_csv_trace(text.as_bytes()).unwrap();
        let ts: Vec<u64> = load.txs.iter().map(|t| t.timestamp_ms).collect();
        assert_eq!(ts, vec![10, 20, 30]);
        assert_eq!(load.txs[0].from, Address::from_hex("0x03").unwrap());
        assert_eq!(load.txs.iter().map(|t| t.id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn malformed_address_reports_line() {
        let text = "timestamp_ms,from_hex,to_hex,value\n1,0x01,0x02,5\n2,0xzz,0x02,5\n";
        match parse_csv_trace(text.as_bytes()) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column() {
        let text = "timestamp_ms,from_hex,value\n1,0x01,5\n";
        assert!(matches!(parse_csv_trace(text.as_bytes()), Err(WorkloadError::MissingColumn("to_hex"))));
    }

    #[test]
    fn contract_creations_skipped_self_transfers_kept() {
        let text = "timestamp_ms,from_hex,to_hex,value\n1,0x01,,5\n2,0x01,0x01,0\n";
        let load = parse_csv_trace(text.as_bytes()).unwrap();
        assert_eq!(load.skipped_contract_creations, 1);
        assert_eq!(load.txs.len(), 1);
        assert_eq!(load.txs[0].value, 0);
    }

    #[test]
    fn export_import_roundtrip_and_gzip() {
        let txs = generate_synthetic(&synthetic(50, 200, Popularity::Uniform, None, 3)).unwrap();
        let mut buf = Vec::new();
        write_csv_trace(&txs, &mut buf).unwrap();
        assert_eq!(parse_csv_trace(buf.as_slice()).unwrap().txs, txs);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv.gz");
        let mut gz = flate2::write::GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::default());
        gz.write_all(&buf).unwrap();
        gz.finish().unwrap();
        assert_eq!(load_csv_trace(&path).unwrap().txs, txs);
    }

    #[test]
    fn shuffled_fixture_is_stably_sorted() {
        let text = "timestamp_ms,from_hex,to_hex,value\n5,0x01,0x02,1\n1,0x03,0x04,2\n5,0x05,0x06,3\n1,0x07,0x08,4\n";
        let load = parse_csv_trace(text.as_bytes()).unwrap();
        let values: Vec<Tokens> = load.txs.iter().map(|t| t.value).collect();
        assert_eq!(values, vec![2, 4, 1, 3]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = synthetic(100, 500, Popularity::Zipf { exponent: 1.0 }, None, 9);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = synthetic(100, 500, Popularity::Zipf { exponent: 1.0 }, None, 10);
        assert_ne!(
            workload_digest(&generate_synthetic(&spec).unwrap()),
            workload_digest(&generate_synthetic(&other).unwrap())
        );
    }

    #[test]
    fn zipf_concentrates_on_top_accounts() {
        let txs = generate_synthetic(&synthetic(1000, 20_000, Popularity::Zipf { exponent: 1.2 }, None, 1)).unwrap();
        let mut counts: HashMap<Address, usize> = HashMap::new();
        for tx in &txs {
            *counts.entry(tx.from).or_default() += 1;
            *counts.entry(tx.to).or_default() += 1;
        }
        let mut c: Vec<usize> = counts.into_values().collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        let top: usize = c.iter().take(10).sum();
        assert!(top as f64 >= 0.3 * (2 * txs.len()) as f64, "top-1% share {top}");
    }

    #[test]
    fn values_in_range_and_spec_validation() {
        let txs = generate_synthetic(&synthetic(10, 1000, Popularity::Uniform, None, 0)).unwrap();
        assert!(txs.iter().all(|t| (1..=100).contains(&t.value)));
        assert!(generate_synthetic(&synthetic(1, 10, Popularity::Uniform, None, 0)).is_err());
        assert!(generate_synthetic(&synthetic(10, 10, Popularity::Zipf { exponent: 0.0 }, None, 0)).is_err());
        let bad = Community {
            n_clusters: 2,
            intra_prob: 1.5,
        };
        assert!(generate_synthetic(&synthetic(10, 10, Popularity::Uniform, Some(bad), 0)).is_err());
    }

    #[test]
    fn community_payees_mostly_in_cluster() {
        let c = Community {
            n_clusters: 8,
            intra_prob: 0.9,
        };
        let txs = generate_synthetic(&synthetic(800, 5000, Popularity::Zipf { exponent: 1.0 }, Some(c), 4)).unwrap();
        let index: HashMap<Address, usize> = (0..800).map(|i| (account_address(i), i)).collect();
        let same = txs.iter().filter(|t| index[&t.from] % 8 == index[&t.to] % 8).count();
        assert!(same as f64 > 0.85 * txs.len() as f64);
    }
}
