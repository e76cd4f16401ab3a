//! P-shard logic: the per-epoch account state graph, balanced k-way
//! partitioning with brokers pinned to every shard, broker segmentation, and
//! the state block that carries the result to the M-shards.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{empty_root, Canonical, Digest, Encoder};
use crate::ledger::{Address, RelayLeg, ShardId, Tokens, TxBlock, TxPayload};
use crate::merkle::merkle_root;
use crate::msst::{AccountState, ShardStateTree};

pub const DEFAULT_EPSILON: f64 = 0.10;
const REFINE_PASSES: usize = 10;
/// Graph-growing restarts: at least this many, more on small graphs where
/// they are cheap and a tight balance cap leaves few good seeds.
const GROWTH_RESTARTS: usize = 3;
const RESTART_BUDGET: usize = 4096;
const MAX_GROWTH_RESTARTS: usize = 64;
const SWAP_CANDIDATES: usize = 48;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("shard count must be at least 1")]
    NoShards,
    #[error("imbalance tolerance must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("vertex {0} has no shard assignment")]
    UncoveredVertex(Address),
    #[error("broker {broker} holds {balance} tokens, needs at least one per shard ({shards})")]
    InsufficientBrokerStake {
        broker: Address,
        balance: Tokens,
        shards: usize,
    },
    #[error("malformed edge list at line {line}: {reason}")]
    EdgeListParse { line: usize, reason: String },
}

/// Weighted account graph: edge weight = number of transactions between the
/// pair, vertex weight = sum of incident edge weights.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateGraph {
    vertices: BTreeMap<Address, u64>,
    edges: BTreeMap<(Address, Address), u64>,
    brokers: BTreeSet<Address>,
}

fn edge_key(a: Address, b: Address) -> (Address, Address) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl StateGraph {
    pub fn new(brokers: BTreeSet<Address>) -> Self {
        StateGraph {
            brokers,
            ..Self::default()
        }
    }

    pub fn add_transaction(&mut self, from: Address, to: Address) {
        self.add_edge_weight(from, to, 1);
    }

    fn add_edge_weight(&mut self, a: Address, b: Address, w: u64) {
        *self.edges.entry(edge_key(a, b)).or_insert(0) += w;
        *self.vertices.entry(a).or_insert(0) += w;
        if a != b {
            *self.vertices.entry(b).or_insert(0) += w;
        }
    }

    pub fn vertex_weight(&self, a: &Address) -> Option<u64> {
        self.vertices.get(a).copied()
    }

    pub fn edge_weight(&self, a: &Address, b: &Address) -> Option<u64> {
        self.edges.get(&edge_key(*a, *b)).copied()
    }

    pub fn vertices(&self) -> impl Iterator<Item = (&Address, u64)> {
        self.vertices.iter().map(|(a, w)| (a, *w))
    }

    pub fn edges(&self) -> impl Iterator<Item = (&(Address, Address), u64)> {
        self.edges.iter().map(|(k, w)| (k, *w))
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_broker(&self, a: &Address) -> bool {
        self.brokers.contains(a)
    }

    pub fn brokers(&self) -> &BTreeSet<Address> {
        &self.brokers
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Sum of weights of edges that do not touch a broker.
    pub fn non_broker_edge_weight(&self) -> u64 {
        self.edges
            .iter()
            .filter(|((a, b), _)| a != b && !self.is_broker(a) && !self.is_broker(b))
            .map(|(_, w)| *w)
            .sum()
    }

    /// Debug dump, one `addrA addrB weight` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for ((a, b), w) in &self.edges {
            let _ = writeln!(out, "{a} {b} {w}");
        }
        out
    }

    pub fn parse_edge_list(text: &str, brokers: BTreeSet<Address>) -> Result<Self, PartitionError> {
        let mut g = StateGraph::new(brokers);
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| PartitionError::EdgeListParse { line: line_no, reason };
            let mut fields = line.split_whitespace();
            let (Some(a), Some(b), Some(w), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err("expected three fields".into()));
            };
            let a = Address::from_hex(a).map_err(|e| err(e.to_string()))?;
            let b = Address::from_hex(b).map_err(|e| err(e.to_string()))?;
            let w: u64 = w.parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
            if w == 0 {
                return Err(err("edge weight must be at least 1".into()));
            }
            g.add_edge_weight(a, b, w);
        }
        Ok(g)
    }
}

/// Builds the epoch's state graph from its transaction blocks.
///
/// Each payer/payee relation is counted once: plain transfers, Θ1 at its
/// source shard (as payer–payee of the raw transaction) and the deduct leg of
/// a relayed transfer. Θ2, failure-path and deposit transactions are the
/// second halves of relations already counted.
pub fn build_state_graph<'a>(blocks: impl IntoIterator<Item = &'a TxBlock>, brokers: &BTreeSet<Address>) -> StateGraph {
    let mut g = StateGraph::new(brokers.clone());
    for block in blocks {
        for tx in &block.txs {
            match &tx.payload {
                TxPayload::None | TxPayload::Relay(RelayLeg::Deduct) => g.add_transaction(tx.from, tx.to),
                TxPayload::Half(h) if h.current_height.is_some() => g.add_transaction(h.raw.payer, h.raw.payee),
                _ => {}
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMap {
    pub epoch: u64,
    pub assignment: BTreeMap<Address, ShardId>,
}

#[derive(Debug, Clone)]
pub struct PartitionOutcome {
    pub map: PartitionMap,
    pub loads: Vec<u64>,
    pub cut: u64,
    /// False when no assignment within `(1+ε)×` average was found; the
    /// best-effort map is still returned.
    pub balanced: bool,
}

impl PartitionOutcome {
    /// Max shard load over the average.
    pub fn imbalance(&self) -> f64 {
        let total: u64 = self.loads.iter().sum();
        if total == 0 {
            return 1.0;
        }
        let avg = total as f64 / self.loads.len() as f64;
        *self.loads.iter().max().unwrap() as f64 / avg
    }
}

/// Non-broker vertices with compact indices and adjacency lists that skip
/// broker edges and self loops.
struct Compact {
    addrs: Vec<Address>,
    weights: Vec<u64>,
    adj: Vec<Vec<(usize, u64)>>,
}

impl Compact {
    fn from_graph(g: &StateGraph) -> Self {
        let mut order: Vec<(&Address, u64)> = g.vertices().filter(|(a, _)| !g.is_broker(a)).collect();
        // Descending weight, then lowest address.
        order.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(y.0)));
        let addrs: Vec<Address> = order.iter().map(|(a, _)| **a).collect();
        let weights: Vec<u64> = order.iter().map(|(_, w)| *w).collect();
        let index: std::collections::HashMap<Address, usize> = addrs.iter().enumerate().map(|(i, a)| (*a, i)).collect();
        let mut adj = vec![Vec::new(); addrs.len()];
        for ((a, b), w) in g.edges() {
            if a == b {
                continue;
            }
            if let (Some(&i), Some(&j)) = (index.get(a), index.get(b)) {
                adj[i].push((j, w));
                adj[j].push((i, w));
            }
        }
        Compact { addrs, weights, adj }
    }

    fn len(&self) -> usize {
        self.addrs.len()
    }

    fn cut(&self, part: &[usize]) -> u64 {
        let mut c = 0;
        for (i, nbrs) in self.adj.iter().enumerate() {
            for &(j, w) in nbrs {
                if i < j && part[i] != part[j] {
                    c += w;
                }
            }
        }
        c
    }

    fn loads(&self, part: &[usize], k: usize) -> Vec<u64> {
        let mut loads = vec![0; k];
        for (i, &p) in part.iter().enumerate() {
            loads[p] += self.weights[i];
        }
        loads
    }

    fn connectivity(&self, v: usize, part: &[usize], k: usize) -> Vec<u64> {
        let mut conn = vec![0; k];
        for &(j, w) in &self.adj[v] {
            conn[part[j]] += w;
        }
        conn
    }
}

/// Assign in descending weight order to the currently lightest shard.
fn greedy_seed(c: &Compact, k: usize) -> Vec<usize> {
    let mut loads = vec![0u64; k];
    c.weights
        .iter()
        .map(|&w| {
            let s = (0..k).min_by_key(|&s| (loads[s], s)).unwrap();
            loads[s] += w;
            s
        })
        .collect()
}

/// Graph growing: the lightest shard repeatedly absorbs the unassigned vertex
/// most connected to it, starting from randomly chosen roots.
fn growth_seed(c: &Compact, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let n = c.len();
    let mut part = vec![NONE; n];
    let mut conn: Vec<Vec<u64>> = vec![vec![0; n]; k];
    let mut heaps: Vec<BinaryHeap<(u64, Reverse<usize>)>> = vec![BinaryHeap::new(); k];
    let mut loads = vec![0u64; k];
    let mut roots: Vec<usize> = (0..n).collect();
    roots.shuffle(rng);
    let mut root_iter = roots.into_iter();
    let mut assigned = 0;

    let mut assign = |v: usize, s: usize, part: &mut Vec<usize>, loads: &mut Vec<u64>, heaps: &mut Vec<BinaryHeap<(u64, Reverse<usize>)>>| {
        part[v] = s;
        loads[s] += c.weights[v];
        for &(u, w) in &c.adj[v] {
            if part[u] == NONE {
                conn[s][u] += w;
                heaps[s].push((conn[s][u], Reverse(u)));
            }
        }
    };

    while assigned < n {
        let s = (0..k).min_by_key(|&s| (loads[s], s)).unwrap();
        let mut pick = None;
        while let Some((_, Reverse(u))) = heaps[s].pop() {
            if part[u] == NONE {
                pick = Some(u);
                break;
            }
        }
        let v = match pick {
            Some(v) => v,
            None => loop {
                let r = root_iter.next().expect("unassigned vertex remains");
                if part[r] == NONE {
                    break r;
                }
            },
        };
        assign(v, s, &mut part, &mut loads, &mut heaps);
        assigned += 1;
    }
    part
}

/// Single-vertex moves and pairwise swaps that reduce the cut without
/// breaking the balance cap, until a fixed point or the pass budget.
fn refine(c: &Compact, part: &mut [usize], k: usize, cap: u64) {
    let mut loads = c.loads(part, k);
    for _ in 0..REFINE_PASSES {
        let mut improved = false;

        for v in 0..c.len() {
            let cur = part[v];
            let w = c.weights[v];
            let conn = c.connectivity(v, part, k);
            let over = loads[cur] > cap;
            let mut best: Option<(i64, usize)> = None;
            for t in (0..k).filter(|&t| t != cur) {
                if loads[t] + w > cap && !(over && loads[t] + w < loads[cur]) {
                    continue;
                }
                let gain = conn[t] as i64 - conn[cur] as i64;
                if (gain > 0 || over) && best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, t));
                }
            }
            if let Some((_, t)) = best {
                part[v] = t;
                loads[cur] -= w;
                loads[t] += w;
                improved = true;
            }
        }

        // Swaps between boundary vertices whose best move is blocked.
        let mut candidates: Vec<(i64, usize, usize)> = Vec::new();
        for v in 0..c.len() {
            let conn = c.connectivity(v, part, k);
            let cur = part[v];
            if let Some((g, t)) = (0..k)
                .filter(|&t| t != cur && conn[t] > 0)
                .map(|t| (conn[t] as i64 - conn[cur] as i64, t))
                .max_by_key(|&(g, t)| (g, Reverse(t)))
            {
                candidates.push((g, v, t));
            }
        }
        candidates.sort_by_key(|&(g, v, _)| (Reverse(g), v));
        candidates.truncate(SWAP_CANDIDATES);
        let cand_vertices: Vec<usize> = candidates.iter().map(|&(_, v, _)| v).collect();
        loop {
            let mut best: Option<(i64, usize, usize)> = None;
            for (i, &u) in cand_vertices.iter().enumerate() {
                let cu = c.connectivity(u, part, k);
                for &v in &cand_vertices[i + 1..] {
                    let (a, b) = (part[u], part[v]);
                    if a == b {
                        continue;
                    }
                    let (wu, wv) = (c.weights[u], c.weights[v]);
                    if loads[b] - wv + wu > cap.max(loads[b]) || loads[a] - wu + wv > cap.max(loads[a]) {
                        continue;
                    }
                    let cv = c.connectivity(v, part, k);
                    let uv: u64 = c.adj[u].iter().filter(|(j, _)| *j == v).map(|(_, w)| *w).sum();
                    let gain = (cu[b] as i64 - cu[a] as i64) + (cv[a] as i64 - cv[b] as i64) - 2 * uv as i64;
                    if gain > 0 && best.is_none_or(|(g, _, _)| gain > g) {
                        best = Some((gain, u, v));
                    }
                }
            }
            let Some((_, u, v)) = best else { break };
            let (a, b) = (part[u], part[v]);
            loads[a] = loads[a] - c.weights[u] + c.weights[v];
            loads[b] = loads[b] - c.weights[v] + c.weights[u];
            part.swap(u, v);
            improved = true;
        }

        if !improved {
            break;
        }
    }
}

/// Swaps that pull an overloaded shard under the cap: a heavier vertex out,
/// the lightest vertex that still keeps the receiving shard within the cap
/// in. Used when single moves cannot restore balance.
fn repair_balance(c: &Compact, part: &mut [usize], k: usize, cap: u64) {
    let mut loads = c.loads(part, k);
    for _ in 0..c.len() {
        let Some(a) = (0..k).filter(|&s| loads[s] > cap).max_by_key(|&s| (loads[s], Reverse(s))) else {
            return;
        };
        let mut by_shard: Vec<Vec<usize>> = vec![Vec::new(); k];
        for v in 0..c.len() {
            by_shard[part[v]].push(v);
        }
        for members in &mut by_shard {
            members.sort_by_key(|&v| (c.weights[v], v));
        }
        // Largest reduction of the overloaded shard, then lowest indices.
        let mut best: Option<(u64, usize, usize)> = None;
        for &u in &by_shard[a] {
            let wu = c.weights[u];
            for b in (0..k).filter(|&b| b != a) {
                let floor = (loads[b] + wu).saturating_sub(cap);
                let members = &by_shard[b];
                let at = members.partition_point(|&v| c.weights[v] < floor);
                let Some(&v) = members.get(at) else { continue };
                let wv = c.weights[v];
                if wv >= wu {
                    continue;
                }
                let reduction = wu - wv;
                if best.is_none_or(|(r, _, _)| reduction > r) {
                    best = Some((reduction, u, v));
                }
            }
        }
        let Some((_, u, v)) = best else { return };
        let b = part[v];
        loads[a] = loads[a] - c.weights[u] + c.weights[v];
        loads[b] = loads[b] - c.weights[v] + c.weights[u];
        part.swap(u, v);
    }
}

fn validate(num_shards: usize, epsilon: f64) -> Result<(), PartitionError> {
    if num_shards == 0 {
        return Err(PartitionError::NoShards);
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(PartitionError::BadEpsilon(epsilon));
    }
    Ok(())
}

/// Balance cap `⌊(1+ε) × average⌋` for a total weight split over `k` shards.
pub fn balance_cap(total: u64, k: usize, epsilon: f64) -> u64 {
    ((1.0 + epsilon) * total as f64 / k as f64).floor() as u64
}

/// Partitions the non-broker vertices of `graph` into `num_shards` sectors.
/// Brokers are pinned to every shard and never assigned.
pub fn partition_graph(
    graph: &StateGraph,
    num_shards: usize,
    epsilon: f64,
    seed: u64,
) -> Result<PartitionOutcome, PartitionError> {
    validate(num_shards, epsilon)?;
    let c = Compact::from_graph(graph);
    let k = num_shards;
    let total: u64 = c.weights.iter().sum();
    let cap = balance_cap(total, k, epsilon);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![greedy_seed(&c, k)];
    if k > 1 {
        let restarts = (RESTART_BUDGET / c.len().max(1)).clamp(GROWTH_RESTARTS, MAX_GROWTH_RESTARTS);
        for _ in 0..restarts {
            starts.push(growth_seed(&c, k, &mut rng));
        }
    }

    let mut best: Option<(bool, u64, Vec<usize>)> = None;
    for mut part in starts {
        if k > 1 {
            refine(&c, &mut part, k, cap);
            if c.loads(&part, k).iter().any(|&l| l > cap) {
                repair_balance(&c, &mut part, k, cap);
                refine(&c, &mut part, k, cap);
            }
        }
        let balanced = c.loads(&part, k).iter().all(|&l| l <= cap);
        let cut = c.cut(&part);
        let better = match &best {
            None => true,
            Some((b_bal, b_cut, _)) => (balanced, Reverse(cut)) > (*b_bal, Reverse(*b_cut)),
        };
        if better {
            best = Some((balanced, cut, part));
        }
    }
    let (balanced, cut, part) = best.expect("at least one start");
    let loads = c.loads(&part, k);
    let assignment = c
        .addrs
        .iter()
        .zip(&part)
        .map(|(a, &p)| (*a, ShardId(p as u32)))
        .collect();
    Ok(PartitionOutcome {
        map: PartitionMap { epoch: 0, assignment },
        loads,
        cut,
        balanced,
    })
}

/// Weight of non-self edges whose endpoints land in different shards; edges
/// touching a broker cost nothing.
pub fn edge_cut(graph: &StateGraph, assignment: &BTreeMap<Address, ShardId>) -> Result<u64, PartitionError> {
    let shard_of = |a: &Address| assignment.get(a).copied().ok_or(PartitionError::UncoveredVertex(*a));
    for (a, _) in graph.vertices() {
        if !graph.is_broker(a) {
            shard_of(a)?;
        }
    }
    let mut cut = 0;
    for ((a, b), w) in graph.edges() {
        if a == b || graph.is_broker(a) || graph.is_broker(b) {
            continue;
        }
        if shard_of(a)? != shard_of(b)? {
            cut += w;
        }
    }
    Ok(cut)
}

/// Splits each broker's balance evenly over all shards, remainder to the
/// lowest-index shards one unit at a time.
pub fn segment_brokers(
    brokers: &BTreeSet<Address>,
    balances: &BTreeMap<Address, Tokens>,
    num_shards: usize,
) -> Result<BTreeMap<Address, Vec<Tokens>>, PartitionError> {
    if num_shards == 0 {
        return Err(PartitionError::NoShards);
    }
    let s = num_shards as Tokens;
    let mut plan = BTreeMap::new();
    for b in brokers {
        let balance = balances.get(b).copied().unwrap_or(0);
        if balance < s {
            return Err(PartitionError::InsufficientBrokerStake {
                broker: *b,
                balance,
                shards: num_shards,
            });
        }
        let (q, r) = (balance / s, balance % s);
        let slices = (0..s).map(|i| q + Tokens::from(i < r)).collect();
        plan.insert(*b, slices);
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Migration {
    pub address: Address,
    pub from: ShardId,
    pub to: ShardId,
    pub carried: AccountState,
}

impl Canonical for Migration {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.address.0).u32(self.from.0).u32(self.to.0).nested(&self.carried);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateBlockHeader {
    pub prev_state_block_hash: Digest,
    pub epoch: u64,
    pub final_tx_block_hashes: Vec<Digest>,
    pub global_state_root: Digest,
    pub state_updating_root: Digest,
}

impl Canonical for StateBlockHeader {
    fn encode(&self, enc: &mut Encoder) {
        enc.digest(&self.prev_state_block_hash).u64(self.epoch);
        for h in &self.final_tx_block_hashes {
            enc.digest(h);
        }
        enc.digest(&self.global_state_root).digest(&self.state_updating_root);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateBlockBody {
    pub placements: Vec<(Address, ShardId)>,
    pub brokers: Vec<Address>,
    pub migrations: Vec<Migration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateBlock {
    pub header: StateBlockHeader,
    pub body: StateBlockBody,
}

impl StateBlock {
    pub fn hash(&self) -> Digest {
        self.header.digest()
    }
}

pub fn global_state_root(placements: &[(Address, ShardId)], brokers: &[Address]) -> Digest {
    let leaves: Vec<Digest> = placements
        .iter()
        .map(|(a, s)| Digest::hash(&Encoder::new().bytes(&a.0).u32(s.0).finish()))
        .chain(brokers.iter().map(|b| Digest::hash(&Encoder::new().bytes(&b.0).bytes(b"broker").finish())))
        .collect();
    merkle_root(&leaves).unwrap_or_else(|_| empty_root())
}

pub fn state_updating_root(migrations: &[Migration]) -> Digest {
    let leaves: Vec<Digest> = migrations.iter().map(Canonical::digest).collect();
    merkle_root(&leaves).unwrap_or_else(|_| empty_root())
}

/// Assembles the epoch's state block. Every account whose shard differs from
/// `prev_placement` becomes a migration carrying its current state, read from
/// the source shard's tree. Accounts absent from `partition` keep their
/// previous shard.
pub fn build_state_block(
    epoch: u64,
    partition: &BTreeMap<Address, ShardId>,
    brokers: &BTreeSet<Address>,
    prev_state_block: Option<&StateBlock>,
    final_block_hashes: Vec<Digest>,
    prev_placement: &BTreeMap<Address, ShardId>,
    trees: &[ShardStateTree],
) -> StateBlock {
    assert_eq!(final_block_hashes.len(), trees.len(), "one final block hash per M-shard");
    let mut placement = prev_placement.clone();
    for (a, s) in partition {
        if !brokers.contains(a) {
            placement.insert(*a, *s);
        }
    }
    let migrations: Vec<Migration> = placement
        .iter()
        .filter_map(|(a, to)| {
            let from = *prev_placement.get(a)?;
            if from == *to {
                return None;
            }
            let carried = trees[from.index()].get(a)?.clone();
            Some(Migration {
                address: *a,
                from,
                to: *to,
                carried,
            })
        })
        .collect();
    let placements: Vec<(Address, ShardId)> = placement.into_iter().collect();
    let broker_list: Vec<Address> = brokers.iter().copied().collect();
    StateBlock {
        header: StateBlockHeader {
            prev_state_block_hash: prev_state_block.map_or(Digest::ZERO, StateBlock::hash),
            epoch,
            final_tx_block_hashes: final_block_hashes,
            global_state_root: global_state_root(&placements, &broker_list),
            state_updating_root: state_updating_root(&migrations),
        },
        body: StateBlockBody {
            placements,
            brokers: broker_list,
            migrations,
        },
    }
}

/// Renames the parts of `fresh` so each keeps the label of the previous
/// shard it overlaps most (by vertex weight, plus one per account), which
/// keeps migrations to what the new partition actually requires. Pairs are
/// taken greedily in descending overlap; parts left without a partner take
/// the unused labels in ascending order.
pub fn relabel_to_previous(
    fresh: &BTreeMap<Address, ShardId>,
    previous: &BTreeMap<Address, ShardId>,
    graph: &StateGraph,
    num_shards: usize,
) -> BTreeMap<Address, ShardId> {
    let mut overlap = vec![vec![0u64; num_shards]; num_shards];
    for (a, new) in fresh {
        if let Some(old) = previous.get(a) {
            overlap[new.index()][old.index()] += 1 + graph.vertex_weight(a).unwrap_or(0);
        }
    }
    let mut pairs: Vec<(u64, usize, usize)> = Vec::new();
    for (n, row) in overlap.iter().enumerate() {
        for (o, &w) in row.iter().enumerate() {
            if w > 0 {
                pairs.push((w, n, o));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut label: Vec<Option<usize>> = vec![None; num_shards];
    let mut taken = vec![false; num_shards];
    for (_, n, o) in pairs {
        if label[n].is_none() && !taken[o] {
            label[n] = Some(o);
            taken[o] = true;
        }
    }
    let mut free = (0..num_shards).filter(|&o| !taken[o]);
    let label: Vec<usize> = label
        .into_iter()
        .map(|l| l.unwrap_or_else(|| free.next().expect("one free label per unmatched part")))
        .collect();
    fresh.iter().map(|(a, s)| (*a, ShardId(label[s.index()] as u32))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{BlockHeader, SimTime, Transaction};
    use crate::msst::StorageMap;

    fn addr(b: u8) -> Address {
        Address([b; 20])
    }

    fn block(txs: &[(Address, Address)]) -> TxBlock {
        TxBlock {
            header: BlockHeader {
                shard: ShardId(0),
                height: 1,
                prev_hash: Digest::ZERO,
                tx_root: Digest::ZERO,
                state_root: Digest::ZERO,
                produced_at: SimTime::ZERO,
            },
            txs: txs
                .iter()
                .enumerate()
                .map(|(i, (f, t))| Transaction::plain(i as u64, *f, *t, 1, 0, SimTime::ZERO))
                .collect(),
        }
    }

    #[test]
    fn graph_from_example_transactions() {
        let (a, b, c) = (addr(0xa), addr(0xb), addr(0xc));
        let g = build_state_graph(&[block(&[(a, c), (b, c), (a, b)])], &BTreeSet::new());
        assert_eq!(g.edge_weight(&a, &c), Some(1));
        assert_eq!(g.edge_weight(&c, &b), Some(1));
        assert_eq!(g.edge_weight(&a, &b), Some(1));
        assert_eq!(g.vertex_weight(&c), Some(2));

        let g = build_state_graph(&[block(&[(a, b), (a, b)])], &BTreeSet::new());
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.edge_weight(&a, &b), Some(2));
        assert_eq!(g.vertex_weight(&a), Some(2));

        assert!(build_state_graph(&[], &BTreeSet::new()).is_empty());
    }

    #[test]
    fn broker_pinned_example() {
        let (a, b, c) = (addr(0xa), addr(0xb), addr(0xc));
        let brokers: BTreeSet<_> = [c].into();
        let g = build_state_graph(&[block(&[(a, c), (b, c), (a, b)])], &brokers);
        let out = partition_graph(&g, 2, DEFAULT_EPSILON, 7).unwrap();
        assert!(!out.map.assignment.contains_key(&c));
        assert_ne!(out.map.assignment[&a], out.map.assignment[&b]);
        assert_eq!(edge_cut(&g, &out.map.assignment).unwrap(), 1);
        assert!(out.balanced);
    }

    #[test]
    fn single_shard_has_no_cut() {
        let g = build_state_graph(&[block(&[(addr(1), addr(2)), (addr(2), addr(3))])], &BTreeSet::new());
        let out = partition_graph(&g, 1, DEFAULT_EPSILON, 0).unwrap();
        assert!(out.map.assignment.values().all(|s| *s == ShardId(0)));
        assert_eq!(out.cut, 0);
    }

    #[test]
    fn invalid_inputs() {
        let g = StateGraph::default();
        assert_eq!(partition_graph(&g, 0, 0.1, 0).unwrap_err(), PartitionError::NoShards);
        assert_eq!(partition_graph(&g, 2, 0.0, 0).unwrap_err(), PartitionError::BadEpsilon(0.0));
    }

    #[test]
    fn monoxide_placement_cut() {
        let (a, b, c) = (addr(0xa), addr(0xb), addr(0xc));
        let g = build_state_graph(&[block(&[(a, c), (b, c), (a, b)])], &BTreeSet::new());
        let place: BTreeMap<_, _> = [(a, ShardId(1)), (b, ShardId(2)), (c, ShardId(2))].into();
        assert_eq!(edge_cut(&g, &place).unwrap(), 2);
        let missing: BTreeMap<_, _> = [(a, ShardId(1))].into();
        assert!(matches!(edge_cut(&g, &missing), Err(PartitionError::UncoveredVertex(_))));
    }

    #[test]
    fn triangle_split_two_one() {
        let (a, b, c) = (addr(1), addr(2), addr(3));
        let g = build_state_graph(&[block(&[(a, b), (b, c), (c, a)])], &BTreeSet::new());
        let place: BTreeMap<_, _> = [(a, ShardId(0)), (b, ShardId(0)), (c, ShardId(1))].into();
        assert_eq!(edge_cut(&g, &place).unwrap(), 2);
    }

    #[test]
    fn two_triangles_joined_by_a_bridge() {
        // Triangle edges weigh 3, bridge weighs 1.
        let v: Vec<Address> = (1..=6).map(addr).collect();
        let mut txs = Vec::new();
        for (x, y) in [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)] {
            for _ in 0..3 {
                txs.push((v[x], v[y]));
            }
        }
        txs.push((v[2], v[3]));
        let g = build_state_graph(&[block(&txs)], &BTreeSet::new());
        let out = partition_graph(&g, 2, DEFAULT_EPSILON, 1).unwrap();
        assert_eq!(out.cut, 1);
        let a = &out.map.assignment;
        assert!(a[&v[0]] == a[&v[1]] && a[&v[1]] == a[&v[2]]);
        assert!(a[&v[3]] == a[&v[4]] && a[&v[4]] == a[&v[5]]);
    }

    #[test]
    fn segmentation_slices() {
        let b = addr(0xb);
        let brokers: BTreeSet<_> = [b].into();
        let plan = |bal: Tokens, s| segment_brokers(&brokers, &[(b, bal)].into(), s);
        assert_eq!(plan(100, 2).unwrap()[&b], vec![50, 50]);
        assert_eq!(plan(101, 2).unwrap()[&b], vec![51, 50]);
        assert_eq!(plan(7, 3).unwrap()[&b], vec![3, 2, 2]);
        assert!(matches!(plan(2, 3), Err(PartitionError::InsufficientBrokerStake { .. })));
    }

    #[test]
    fn edge_list_roundtrip() {
        let g = build_state_graph(&[block(&[(addr(1), addr(2)), (addr(2), addr(3)), (addr(1), addr(2))])], &BTreeSet::new());
        let parsed = StateGraph::parse_edge_list(&g.to_edge_list(), BTreeSet::new()).unwrap();
        assert_eq!(parsed, g);
        assert!(matches!(
            StateGraph::parse_edge_list("0x01 0x02\n", BTreeSet::new()),
            Err(PartitionError::EdgeListParse { line: 1, .. })
        ));
        assert!(StateGraph::parse_edge_list("0x01 0x02 0\n", BTreeSet::new()).is_err());
    }

    fn tree(shard: u32, n: usize, accounts: &[(Address, Tokens)]) -> ShardStateTree {
        let mut t = ShardStateTree::new(ShardId(shard));
        for (a, v) in accounts {
            t.insert(AccountState::new(*a, StorageMap::single(n, ShardId(shard)), *v)).unwrap();
        }
        t
    }

    #[test]
    fn state_block_migrations() {
        let (a, b) = (addr(1), addr(2));
        let trees = vec![tree(0, 2, &[(a, 7)]), tree(1, 2, &[(b, 3)])];
        let prev: BTreeMap<_, _> = [(a, ShardId(0)), (b, ShardId(1))].into();
        let hashes = vec![Digest::ZERO; 2];

        let same = build_state_block(0, &prev, &BTreeSet::new(), None, hashes.clone(), &prev, &trees);
        assert!(same.body.migrations.is_empty());
        assert_eq!(same.header.state_updating_root, empty_root());
        assert_eq!(same.header.prev_state_block_hash, Digest::ZERO);

        let next: BTreeMap<_, _> = [(a, ShardId(1))].into();
        let moved = build_state_block(1, &next, &BTreeSet::new(), Some(&same), hashes, &prev, &trees);
        assert_eq!(moved.body.migrations.len(), 1);
        let m = &moved.body.migrations[0];
        assert_eq!((m.address, m.from, m.to), (a, ShardId(0), ShardId(1)));
        assert_eq!(m.carried.value, 7);
        assert_eq!(moved.header.prev_state_block_hash, same.hash());
        assert_eq!(moved.header.state_updating_root, state_updating_root(&moved.body.migrations));
    }

    #[test]
    fn relabel_keeps_previous_labels() {
        let a: Vec<Address> = (0..6).map(|i| Address::derived("relabel", i)).collect();
        let g = StateGraph::new(BTreeSet::new());
        let previous: BTreeMap<Address, ShardId> = a.iter().enumerate().map(|(i, x)| (*x, ShardId((i / 3) as u32))).collect();
        // Same grouping with swapped labels maps back without migrations.
        let fresh: BTreeMap<Address, ShardId> = a.iter().enumerate().map(|(i, x)| (*x, ShardId(1 - (i / 3) as u32))).collect();
        assert_eq!(relabel_to_previous(&fresh, &previous, &g, 2), previous);
        // A part with no overlap takes the unused label.
        let fresh: BTreeMap<Address, ShardId> = a.iter().map(|x| (*x, ShardId(2))).collect();
        let out = relabel_to_previous(&fresh, &previous, &g, 3);
        assert!(out.values().all(|s| *s == out[&a[0]]));
    }
}
