//! Run measurements: confirmation latency, pool sizes, cross-shard ratio,
//! per-shard workload and their aggregation into a serializable report.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::ledger::{ShardId, SimTime};

pub const LATENCY_COLUMNS: [&str; 4] = ["tx_id", "class", "injected_ms", "confirmed_ms"];
pub const POOL_COLUMNS: [&str; 3] = ["sim_ms", "shard", "size"];
pub const WORKLOAD_COLUMNS: [&str; 3] = ["epoch", "shard", "units"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyClass {
    Intra,
    Cross,
}

impl LatencyClass {
    pub fn name(self) -> &'static str {
        match self {
            LatencyClass::Intra => "intra",
            LatencyClass::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub tx_id: u64,
    pub class: LatencyClass,
    pub injected: SimTime,
    pub confirmed: SimTime,
}

impl LatencySample {
    pub fn latency(&self) -> SimTime {
        self.confirmed.saturating_sub(self.injected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolSample {
    pub at: SimTime,
    pub shard: ShardId,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the given latencies.
    pub fn from_ms(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        LatencyStats {
            count: v.len(),
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
            max_ms: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStats {
    pub total: u64,
    /// Population variance.
    pub variance: f64,
    pub max: u64,
}

pub fn workload_stats(per_shard: &[u64]) -> WorkloadStats {
    if per_shard.is_empty() {
        return WorkloadStats::default();
    }
    let total: u64 = per_shard.iter().sum();
    let n = per_shard.len() as f64;
    let mean = total as f64 / n;
    let variance = per_shard.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    WorkloadStats {
        total,
        variance,
        max: per_shard.iter().copied().max().unwrap_or(0),
    }
}

/// Cross-classified injections over all injections; 0 when nothing was
/// injected.
pub fn ctx_ratio(cross: u64, injected: u64) -> f64 {
    if injected == 0 {
        0.0
    } else {
        cross as f64 / injected as f64
    }
}

/// Cross-shard transaction outcomes, used for atomicity and exclusivity
/// checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtxStats {
    pub created: u64,
    pub succeeded: u64,
    pub refunded: u64,
    pub rejected: u64,
    pub unresolved: u64,
    /// Resolved after source height `H_source + H_lock + 1`.
    pub late: u64,
    /// Both Θ2 and Θ1-at-destination confirmed for one CTX.
    pub exclusivity_violations: u64,
    pub lock_overdue: u64,
    pub gamma_retries: u64,
    pub dropped_messages: u64,
    /// Malicious payers that raced Θ1 with a same-nonce transfer.
    pub threat1_attempts: u64,
    /// Malicious brokers that spent η_broker before Θ2.
    pub threat2_attempts: u64,
    /// A lock was released to the broker without Θ2 paying the payee.
    pub payee_losses: u64,
    /// The payer's lock neither paid the payee nor came back in full.
    pub payer_losses: u64,
    /// Most source blocks a destination had not yet seen when it applied
    /// the deadline check to a Θ2.
    pub max_header_lag: u64,
}

/// Append-only sink fed by the event loop.
#[derive(Debug, Clone, Default)]
pub struct MetricsSink {
    num_shards: usize,
    latencies: Vec<LatencySample>,
    pool: Vec<PoolSample>,
    /// `[epoch][shard]` applied transaction units.
    workload: Vec<Vec<u64>>,
    /// `(injected, cross)` per epoch.
    ctx_by_epoch: Vec<(u64, u64)>,
    pub injected: u64,
    pub rejected: u64,
    first_injection: Option<SimTime>,
    pub ctx: CtxStats,
    pub conservation_checks: u64,
    pub conservation_violations: u64,
}

impl MetricsSink {
    pub fn new(num_shards: usize) -> Self {
        MetricsSink {
            num_shards,
            ..Default::default()
        }
    }

    fn epoch_row(&mut self, epoch: u64) -> &mut Vec<u64> {
        let e = epoch as usize;
        while self.workload.len() <= e {
            self.workload.push(vec![0; self.num_shards]);
        }
        &mut self.workload[e]
    }

    pub fn record_injection(&mut self, epoch: u64, at: SimTime, cross: bool) {
        self.injected += 1;
        self.first_injection.get_or_insert(at);
        let e = epoch as usize;
        if self.ctx_by_epoch.len() <= e {
            self.ctx_by_epoch.resize(e + 1, (0, 0));
        }
        self.ctx_by_epoch[e].0 += 1;
        self.ctx_by_epoch[e].1 += u64::from(cross);
    }

    pub fn record_confirmation(&mut self, tx_id: u64, class: LatencyClass, injected: SimTime, confirmed: SimTime) {
        assert!(confirmed >= injected, "confirmation of tx {tx_id} precedes its injection");
        self.latencies.push(LatencySample {
            tx_id,
            class,
            injected,
            confirmed,
        });
    }

    pub fn record_rejection(&mut self) {
        self.rejected += 1;
    }

    pub fn record_pool(&mut self, at: SimTime, shard: ShardId, size: usize) {
        self.pool.push(PoolSample { at, shard, size });
    }

    pub fn record_workload(&mut self, epoch: u64, shard: ShardId, units: u64) {
        self.epoch_row(epoch)[shard.index()] += units;
    }

    /// Ensures the heatmap has a row for every epoch up to `epoch`.
    pub fn touch_epoch(&mut self, epoch: u64) {
        self.epoch_row(epoch);
    }

    pub fn confirmed(&self) -> u64 {
        self.latencies.len() as u64
    }

    pub fn latencies(&self) -> &[LatencySample] {
        &self.latencies
    }

    pub fn pool_samples(&self) -> &[PoolSample] {
        &self.pool
    }

    pub fn heatmap(&self) -> &[Vec<u64>] {
        &self.workload
    }

    pub fn finish(&self, header: ReportHeader) -> RunReport {
        let ms = |class: Option<LatencyClass>| -> Vec<f64> {
            self.latencies
                .iter()
                .filter(|s| class.is_none_or(|c| s.class == c))
                .map(|s| s.latency().as_ms())
                .collect()
        };
        let tps = match (self.first_injection, self.latencies.iter().map(|s| s.confirmed).max()) {
            (Some(start), Some(end)) if end > start => self.confirmed() as f64 / end.saturating_sub(start).as_secs(),
            _ => 0.0,
        };
        let per_shard: Vec<u64> = (0..self.num_shards)
            .map(|s| self.workload.iter().map(|row| row[s]).sum())
            .collect();
        let cross: u64 = self.ctx_by_epoch.iter().map(|e| e.1).sum();
        let pool_sizes: Vec<usize> = self.pool.iter().map(|p| p.size).collect();
        RunReport {
            header,
            injected: self.injected,
            confirmed: self.confirmed(),
            rejected: self.rejected,
            pending: self.injected - self.confirmed() - self.rejected,
            tps,
            latency: LatencyStats::from_ms(&ms(None)),
            latency_intra: LatencyStats::from_ms(&ms(Some(LatencyClass::Intra))),
            latency_cross: LatencyStats::from_ms(&ms(Some(LatencyClass::Cross))),
            ctx_ratio: ctx_ratio(cross, self.injected),
            ctx_ratio_per_epoch: self.ctx_by_epoch.iter().map(|&(i, c)| ctx_ratio(c, i)).collect(),
            workload: workload_stats(&per_shard),
            workload_per_shard: per_shard,
            workload_variance_per_epoch: self.workload.iter().map(|row| workload_stats(row).variance).collect(),
            pool_mean: if pool_sizes.is_empty() {
                0.0
            } else {
                pool_sizes.iter().sum::<usize>() as f64 / pool_sizes.len() as f64
            },
            pool_max: pool_sizes.iter().copied().max().unwrap_or(0),
            ctx: self.ctx,
            conservation_checks: self.conservation_checks,
            conservation_violations: self.conservation_violations,
        }
    }

    pub fn write_latency_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(LATENCY_COLUMNS)?;
        for s in &self.latencies {
            w.write_record([
                s.tx_id.to_string(),
                s.class.name().to_string(),
                s.injected.as_ms().to_string(),
                s.confirmed.as_ms().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_pool_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(POOL_COLUMNS)?;
        for p in &self.pool {
            w.write_record([p.at.as_ms().to_string(), p.shard.0.to_string(), p.size.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_workload_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(WORKLOAD_COLUMNS)?;
        for (e, row) in self.workload.iter().enumerate() {
            for (s, units) in row.iter().enumerate() {
                w.write_record([e.to_string(), s.to_string(), units.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per epoch, one column per shard.
    pub fn write_heatmap_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string()];
        header.extend((0..self.num_shards).map(|s| format!("shard_{s}")));
        w.write_record(&header)?;
        for (e, row) in self.workload.iter().enumerate() {
            let mut rec = vec![e.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Identifies the run a report belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub policy: String,
    pub shards: usize,
    pub brokers: usize,
    pub seed: u64,
    pub epochs: u64,
    pub h_lock: u64,
    pub workload_digest: String,
    pub sim_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub header: ReportHeader,
    pub injected: u64,
    pub confirmed: u64,
    pub rejected: u64,
    pub pending: u64,
    /// Confirmed transactions per simulated second, first injection to last
    /// confirmation.
    pub tps: f64,
    pub latency: LatencyStats,
    pub latency_intra: LatencyStats,
    pub latency_cross: LatencyStats,
    pub ctx_ratio: f64,
    pub ctx_ratio_per_epoch: Vec<f64>,
    pub workload: WorkloadStats,
    pub workload_per_shard: Vec<u64>,
    pub workload_variance_per_epoch: Vec<f64>,
    pub pool_mean: f64,
    pub pool_max: usize,
    pub ctx: CtxStats,
    pub conservation_checks: u64,
    pub conservation_violations: u64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Digest of the serialized summary.
    pub fn digest(&self) -> Digest {
        Digest::hash(self.to_json().as_bytes())
    }
}

/// Writes `summary.json`, `latency.csv`, `pool.csv`, `workload.csv` and
/// `heatmap.csv` into `dir`.
pub fn export_run(dir: &Path, report: &RunReport, sink: &MetricsSink) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), report.to_json())?;
    let file = |name: &str| fs::File::create(dir.join(name)).map(io::BufWriter::new);
    let csv_err = |e: csv::Error| io::Error::other(e.to_string());
    sink.write_latency_csv(file("latency.csv")?).map_err(csv_err)?;
    sink.write_pool_csv(file("pool.csv")?).map_err(csv_err)?;
    sink.write_workload_csv(file("workload.csv")?).map_err(csv_err)?;
    sink.write_heatmap_csv(file("heatmap.csv")?).map_err(csv_err)?;
    Ok(())
}

/// Per-shard totals keyed by shard, convenient for comparisons.
pub fn shard_totals(report: &RunReport) -> BTreeMap<ShardId, u64> {
    report
        .workload_per_shard
        .iter()
        .enumerate()
        .map(|(s, &u)| (ShardId(s as u32), u))
        .collect()
}
