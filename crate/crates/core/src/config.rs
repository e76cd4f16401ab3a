//! Run configuration: JSON schema, validation, `key=value` overrides and
//! named random sub-streams derived from the top-level seed.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::baselines::Policy;
use crate::broker::{recommend_lock_duration, MIN_LOCK_DURATION};
use crate::digest::{Digest, Encoder};
use crate::ledger::BlockHeight;
use crate::workload::{Community, Popularity, WorkloadSource, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lock duration in blocks, or `auto` to calibrate from the first epoch's
/// measured cross-shard latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HLock {
    #[default]
    Auto,
    Blocks(BlockHeight),
}

impl Serialize for HLock {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            HLock::Auto => s.serialize_str("auto"),
            HLock::Blocks(b) => s.serialize_u64(*b),
        }
    }
}

impl<'de> Deserialize<'de> for HLock {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(HLock::Blocks(n)),
            Raw::Str(s) if s == "auto" => Ok(HLock::Auto),
            Raw::Str(s) => s
                .parse()
                .map(HLock::Blocks)
                .map_err(|_| serde::de::Error::custom(format!("h_lock must be \"auto\" or a block count, got {s:?}"))),
        }
    }
}

impl fmt::Display for HLock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HLock::Auto => f.write_str("auto"),
            HLock::Blocks(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub latency_ms: f64,
    pub jitter_ms: f64,
    /// Applies to Θ2 and failure-proof deliveries.
    pub drop_prob: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latency_ms: 100.0,
            jitter_ms: 10.0,
            drop_prob: 0.0,
        }
    }
}

/// Per-CTX probabilities of the double-spend races: a payer spending
/// η_payer before Θ1, or a broker spending η_broker before Θ2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub malicious_payer_prob: f64,
    pub malicious_broker_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub policy: Policy,
    pub shards: usize,
    pub brokers: usize,
    /// Inject only the first `n_tx` workload transactions.
    pub n_tx: Option<usize>,
    /// Transactions per simulated second.
    pub arrival_rate: f64,
    pub block_interval_s: f64,
    pub block_capacity: usize,
    pub epoch_blocks: u64,
    pub h_lock: HLock,
    pub epsilon: f64,
    pub network: NetworkConfig,
    pub seed: u64,
    pub workload: WorkloadSpec,
    pub output_dir: String,
    /// Θ2 is dispatched together with Θ1 instead of after its confirmation.
    pub trusted_brokers: bool,
    pub initial_balance: u64,
    /// Total balance of each broker, segmented evenly over all shards.
    pub broker_stake: u64,
    pub adversary: AdversaryConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            policy: Policy::BrokerChain,
            shards: 8,
            brokers: 40,
            n_tx: None,
            arrival_rate: 500.0,
            block_interval_s: 8.0,
            block_capacity: 2000,
            epoch_blocks: 10,
            h_lock: HLock::Auto,
            epsilon: crate::partition::DEFAULT_EPSILON,
            network: NetworkConfig::default(),
            seed: 1,
            workload: WorkloadSpec {
                source: WorkloadSource::Synthetic {
                    n_accounts: 2000,
                    n_txs: 20_000,
                    popularity: Popularity::Zipf { exponent: 1.0 },
                    community: Some(Community {
                        n_clusters: 8,
                        intra_prob: 0.9,
                    }),
                },
                seed: 0,
            },
            output_dir: "out".into(),
            trusted_brokers: false,
            initial_balance: 1_000_000,
            broker_stake: 100_000_000,
            adversary: AdversaryConfig::default(),
        }
    }
}

/// Independent random streams derived from the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Workload,
    Network,
    Partition,
    Adversary,
}

impl Stream {
    fn name(self) -> &'static str {
        match self {
            Stream::Workload => "workload",
            Stream::Network => "network",
            Stream::Partition => "partition",
            Stream::Adversary => "adversary",
        }
    }
}

/// First eight bytes of `H(seed ‖ name)`.
pub fn sub_seed(seed: u64, stream: Stream) -> u64 {
    let d = Digest::hash(&Encoder::new().u64(seed).bytes(stream.name().as_bytes()).finish());
    u64::from_le_bytes(d.0[..8].try_into().expect("eight bytes"))
}

const ALIASES: [(&str, &str); 6] = [
    ("S", "shards"),
    ("K", "brokers"),
    ("N_TX", "n_tx"),
    ("latency_ms", "network.latency_ms"),
    ("jitter_ms", "network.jitter_ms"),
    ("drop_prob", "network.drop_prob"),
];

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialized form.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.shards == 0 {
            return bad("shards must be at least 1".into());
        }
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return bad(format!("arrival_rate must be positive, got {}", self.arrival_rate));
        }
        if !(self.block_interval_s > 0.0 && self.block_interval_s.is_finite()) {
            return bad(format!("block_interval_s must be positive, got {}", self.block_interval_s));
        }
        if self.block_capacity == 0 || self.epoch_blocks == 0 {
            return bad("block_capacity and epoch_blocks must be positive".into());
        }
        if let HLock::Blocks(b) = self.h_lock {
            if b < MIN_LOCK_DURATION {
                return bad(format!("h_lock must be at least {MIN_LOCK_DURATION} blocks"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        let n = &self.network;
        if !(n.latency_ms >= 0.0 && n.jitter_ms >= 0.0) {
            return bad("network latency and jitter must be non-negative".into());
        }
        if !(0.0..1.0).contains(&n.drop_prob) {
            return bad(format!("drop_prob must lie in [0, 1), got {}", n.drop_prob));
        }
        let a = &self.adversary;
        if !((0.0..=1.0).contains(&a.malicious_payer_prob) && (0.0..=1.0).contains(&a.malicious_broker_prob)) {
            return bad("adversary probabilities must lie in [0, 1]".into());
        }
        if self.n_tx == Some(0) {
            return bad("n_tx must be positive".into());
        }
        if self.initial_balance == 0 {
            return bad("initial_balance must be positive".into());
        }
        if self.policy.uses_brokers() && self.broker_stake < self.shards as u64 {
            return bad("broker_stake must cover at least one token per shard".into());
        }
        if let WorkloadSource::Synthetic { n_accounts, .. } = &self.workload.source {
            if self.policy.uses_brokers() && self.brokers > *n_accounts {
                return bad(format!("{} brokers exceed {n_accounts} accounts", self.brokers));
            }
        }
        self.workload.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Applies `key=value`, where `key` is a field path (dots for nesting,
    /// e.g. `network.drop_prob`) or a short alias such as `S` or `K`. The
    /// value is read as JSON, falling back to a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let path = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, p)| p);
        let mut tree = serde_json::to_value(&*self)?;
        let mut slot = &mut tree;
        for part in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let next: Config = serde_json::from_value(tree)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Applies a list of `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<(), ConfigError> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("override {pair:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Lock duration used before calibration when `h_lock` is `auto`: two
    /// block intervals plus two message hops.
    pub fn provisional_h_lock(&self) -> BlockHeight {
        match self.h_lock {
            HLock::Blocks(b) => b,
            HLock::Auto => recommend_lock_duration(
                2.0 * self.block_interval_s + 2.0 * self.network.latency_ms / 1000.0,
                self.block_interval_s,
            ),
        }
    }

    /// The workload spec with an unset seed (zero) replaced by the
    /// workload sub-stream of the top-level seed.
    pub fn resolved_workload(&self) -> WorkloadSpec {
        let mut spec = self.workload.clone();
        if spec.seed == 0 {
            spec.seed = sub_seed(self.seed, Stream::Workload);
        }
        spec
    }
}
