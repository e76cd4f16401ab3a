//! Comparison placement policies: address-prefix placement with relayed
//! cross-shard transfers, periodic greedy load balancing, and graph
//! partitioning without brokers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ledger::{Address, RelayLeg, ShardId, SimTime, Tokens, Transaction};
use crate::partition::{partition_graph, PartitionError, PartitionOutcome, StateGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[serde(rename = "brokerchain")]
    BrokerChain,
    Monoxide,
    Lbf,
    #[serde(rename = "metis")]
    MetisOnly,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::BrokerChain, Policy::Monoxide, Policy::Lbf, Policy::MetisOnly];

    pub fn name(self) -> &'static str {
        match self {
            Policy::BrokerChain => "brokerchain",
            Policy::Monoxide => "monoxide",
            Policy::Lbf => "lbf",
            Policy::MetisOnly => "metis",
        }
    }

    pub fn uses_brokers(self) -> bool {
        self == Policy::BrokerChain
    }

    /// Whether placement changes at epoch boundaries.
    pub fn repartitions(self) -> bool {
        self != Policy::Monoxide
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown policy {0:?}; expected brokerchain, monoxide, lbf or metis")]
pub struct UnknownPolicy(pub String);

impl FromStr for Policy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "brokerchain" | "broker" => Ok(Policy::BrokerChain),
            "monoxide" => Ok(Policy::Monoxide),
            "lbf" => Ok(Policy::Lbf),
            "metis" | "metisonly" => Ok(Policy::MetisOnly),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}

/// `⌈log2 S⌉`.
pub fn prefix_width(num_shards: usize) -> u32 {
    num_shards.max(1).next_power_of_two().trailing_zeros()
}

/// Shard from the leading `⌈log2 S⌉` address bits, reduced mod `S` so
/// non-power-of-two shard counts stay total.
pub fn monoxide_placement(addr: &Address, num_shards: usize) -> ShardId {
    assert!(num_shards >= 1, "at least one shard");
    ShardId((addr.prefix_bits(prefix_width(num_shards)) % num_shards as u64) as u32)
}

/// The deduct leg of a relayed transfer. The matching deposit is generated
/// by the source shard when the deduct applies and carries no payer nonce.
pub fn monoxide_relay(id: u64, from: Address, to: Address, value: Tokens, nonce: u64, now: SimTime) -> Transaction {
    Transaction::relay(id, from, to, value, nonce, RelayLeg::Deduct, now)
}

/// The system-generated deposit leg; `seq` keeps deposits distinct.
pub fn relay_deposit(id: u64, to: Address, value: Tokens, seq: u64, now: SimTime) -> Transaction {
    Transaction::relay(id, to, to, value, seq, RelayLeg::Deposit, now)
}

/// Accounts by activity descending (ties by lowest address), each onto the
/// currently least-loaded shard (ties by lowest index).
pub fn lbf_reassign(activity: &BTreeMap<Address, u64>, num_shards: usize) -> BTreeMap<Address, ShardId> {
    assert!(num_shards >= 1, "at least one shard");
    let mut order: Vec<(&Address, u64)> = activity.iter().map(|(a, w)| (a, *w)).collect();
    order.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(y.0)));
    let mut loads = vec![0u64; num_shards];
    let mut out = BTreeMap::new();
    for (a, w) in order {
        let (s, _) = loads
            .iter()
            .enumerate()
            .min_by_key(|&(i, l)| (*l, i))
            .expect("non-empty");
        loads[s] += w;
        out.insert(*a, ShardId(s as u32));
    }
    out
}

/// Partition of the graph with no brokers pinned; cross-shard transfers are
/// then relayed.
pub fn metis_only_policy(
    graph: &StateGraph,
    num_shards: usize,
    epsilon: f64,
    seed: u64,
) -> Result<PartitionOutcome, PartitionError> {
    if graph.brokers().is_empty() {
        return partition_graph(graph, num_shards, epsilon, seed);
    }
    let mut plain = StateGraph::new(Default::default());
    for ((a, b), w) in graph.edges() {
        for _ in 0..w {
            plain.add_transaction(*a, *b);
        }
    }
    partition_graph(&plain, num_shards, epsilon, seed)
}
