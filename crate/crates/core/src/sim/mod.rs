//! Deterministic discrete-event simulator. Drives the M-shard engines through
//! epochs (block production, graph partitioning, state block, state
//! reconfiguration), injects workload transactions at a fixed rate, carries
//! messages over a seeded network model and records metrics.
//!
//! Every shard ticks at the same instants, so heights stay synchronized.
//! The epoch boundary runs at the first tick after the epoch's last block,
//! before that tick's blocks; the P-shard's consensus time is folded into
//! that one block interval.

pub mod event;
pub mod network;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tracing::{debug, info};

use crate::baselines::{lbf_reassign, metis_only_policy, monoxide_placement, monoxide_relay, relay_deposit, Policy};
use crate::broker::{
    create_theta1, create_theta2, recommend_lock_duration, select_broker, sign_raw_ctx, AuditLog, BrokerDirectory,
    CrossTxRecord, CtxPhase,
};
use crate::config::{sub_seed, Config, ConfigError, HLock, Stream};
use crate::digest::{Canonical, Digest};
use crate::ledger::{
    classify_tx, Address, BlockHeight, HalfKind, RelayLeg, ShardId, SimTime, Tokens, Transaction, TxBlock, TxClass,
    TxPayload,
};
use crate::metrics::{LatencyClass, MetricsSink, ReportHeader, RunReport};
use crate::msst::{AccountState, PlacementRegistry, ShardStateTree, StorageMap};
use crate::partition::{
    build_state_block, build_state_graph, partition_graph, relabel_to_previous, segment_brokers, PartitionError,
    StateBlock, StateGraph,
};
use crate::shard::{BlockLogEntry, Effect, ShardConfig, ShardEngine, ShardError};
use crate::workload::{workload_digest, WorkloadTx};

pub use event::{EventKind, EventQueue, Message, SimEvent};
pub use network::NetworkModel;

/// Failure-proof resend period, in block intervals.
const GAMMA_RETRY_BLOCKS: u64 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("workload is empty")]
    EmptyWorkload,
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Shard(#[from] ShardError),
}

/// One epoch boundary's repartitioning result.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub graph_vertices: usize,
    pub cut: u64,
    pub balanced: bool,
    pub migrations: usize,
    pub state_block: Digest,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: RunReport,
    pub metrics: MetricsSink,
    pub audit: AuditLog,
    pub blocks: Vec<BlockLogEntry>,
    pub records: BTreeMap<Digest, CrossTxRecord>,
    pub epochs: Vec<EpochSummary>,
    pub brokers: BTreeSet<Address>,
}

#[derive(Debug, Clone, Copy)]
struct Track {
    injected_at: SimTime,
    class: LatencyClass,
    done: bool,
}

/// Brokers: the `k` accounts touching the most transactions among the first
/// `window` workload entries, ties to the lowest address.
pub fn choose_brokers(workload: &[WorkloadTx], k: usize, window: usize) -> BTreeSet<Address> {
    let mut activity: BTreeMap<Address, u64> = BTreeMap::new();
    for tx in workload.iter().take(window.max(1)) {
        *activity.entry(tx.from).or_default() += 1;
        *activity.entry(tx.to).or_default() += 1;
    }
    let mut ranked: Vec<(Address, u64)> = activity.into_iter().collect();
    ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.into_iter().take(k).map(|(a, _)| a).collect()
}

/// Inject times: one transaction every `1 / rate` seconds from time zero.
pub fn inject_times(n: usize, arrival_rate: f64) -> Vec<SimTime> {
    assert!(arrival_rate > 0.0, "arrival rate must be positive");
    (0..n).map(|i| SimTime::from_secs(i as f64 / arrival_rate)).collect()
}

/// Where a fresh workload transaction goes.
#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    Intra(ShardId),
    Broker { source: ShardId, dest: ShardId, broker: Address },
    Relay { source: ShardId, dest: ShardId },
}

/// Intra transactions go to their shared shard; under the broker policy a
/// cross-shard transaction is split through the broker with the most
/// available destination balance, and otherwise (or when no broker can
/// cover it) it is relayed.
pub fn route_tx(
    from: &Address,
    to: &Address,
    value: Tokens,
    registry: &PlacementRegistry,
    directory: Option<&BrokerDirectory>,
) -> Result<Route, crate::ledger::UnknownAccount> {
    Ok(match classify_tx(from, to, registry)? {
        TxClass::Intra(s) => Route::Intra(s),
        TxClass::Cross { source, dest } => match directory.map(|d| select_broker(d, source, dest, value)) {
            Some(Ok(broker)) => Route::Broker { source, dest, broker },
            _ => Route::Relay { source, dest },
        },
    })
}

struct Sim<'a> {
    cfg: &'a Config,
    policy: Policy,
    interval: SimTime,
    workload: &'a [WorkloadTx],
    engines: Vec<ShardEngine>,
    registry: PlacementRegistry,
    /// Non-broker account placement, mirrored from the registry.
    placement: BTreeMap<Address, ShardId>,
    brokers: BTreeSet<Address>,
    directory: Option<BrokerDirectory>,
    queue: EventQueue,
    net: NetworkModel,
    adversary: ChaCha8Rng,
    partition_seed: u64,
    tracks: BTreeMap<u64, Track>,
    records: BTreeMap<Digest, CrossTxRecord>,
    proofs: BTreeMap<Digest, crate::ledger::FailureProof>,
    malicious_broker: BTreeSet<Digest>,
    /// Next nonce a wallet will sign, per account (per account and shard for
    /// brokers).
    wallet: BTreeMap<(Address, Option<ShardId>), u64>,
    h_lock: BlockHeight,
    calibrated: bool,
    epoch: u64,
    reconfig_epoch: u64,
    round: u64,
    injected: usize,
    in_flight: Tokens,
    deposit_seq: u64,
    supply: Tokens,
    epoch_blocks: Vec<TxBlock>,
    last_hashes: Vec<Digest>,
    prev_state_block: Option<StateBlock>,
    metrics: MetricsSink,
    audit: AuditLog,
    blocks: Vec<BlockLogEntry>,
    epochs: Vec<EpochSummary>,
    last_progress_round: u64,
    now: SimTime,
}

/// Runs `policy` over `workload` under `config` until every transaction and
/// CTX is resolved, or until nothing has progressed for a long stretch.
pub fn run_simulation(config: &Config, workload: &[WorkloadTx], policy: Policy) -> Result<SimOutcome, SimError> {
    config.validate()?;
    let workload = &workload[..config.n_tx.map_or(workload.len(), |n| n.min(workload.len()))];
    if workload.is_empty() {
        return Err(SimError::EmptyWorkload);
    }
    let mut sim = Sim::new(config, workload, policy)?;
    sim.run();
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a Config, workload: &'a [WorkloadTx], policy: Policy) -> Result<Self, SimError> {
        let s = cfg.shards;
        let interval = SimTime::from_secs(cfg.block_interval_s);
        let mut registry = PlacementRegistry::new(s);
        let mut placement = BTreeMap::new();

        let per_epoch = (cfg.arrival_rate * cfg.block_interval_s * cfg.epoch_blocks as f64).ceil() as usize;
        let brokers = if policy.uses_brokers() && s > 1 {
            choose_brokers(workload, cfg.brokers, per_epoch)
        } else {
            BTreeSet::new()
        };
        let stakes: BTreeMap<Address, Tokens> = brokers.iter().map(|b| (*b, cfg.broker_stake as Tokens)).collect();
        let segmentation = segment_brokers(&brokers, &stakes, s)?;

        let mut trees: Vec<ShardStateTree> = (0..s).map(|i| ShardStateTree::new(ShardId(i as u32))).collect();
        let mut accounts: BTreeSet<Address> = BTreeSet::new();
        for tx in workload {
            accounts.insert(tx.from);
            accounts.insert(tx.to);
        }
        for a in &accounts {
            if let Some(slices) = segmentation.get(a) {
                registry.segment(*a);
                for (i, tree) in trees.iter_mut().enumerate() {
                    tree.insert(AccountState::new(*a, StorageMap::all(s), slices[i])).expect("fresh tree");
                }
            } else {
                let home = monoxide_placement(a, s);
                registry.place(*a, home);
                placement.insert(*a, home);
                trees[home.index()]
                    .insert(AccountState::new(*a, StorageMap::single(s, home), cfg.initial_balance as Tokens))
                    .expect("fresh tree");
            }
        }
        let supply = trees.iter().map(ShardStateTree::total_value).sum();
        let shard_cfg = ShardConfig {
            block_interval: interval,
            capacity: cfg.block_capacity,
        };
        let engines: Vec<ShardEngine> = trees
            .into_iter()
            .enumerate()
            .map(|(i, t)| ShardEngine::new(ShardId(i as u32), s, shard_cfg, t))
            .collect();
        let last_hashes = engines.iter().map(|e| e.chain()[0].digest()).collect();

        Ok(Sim {
            cfg,
            policy,
            interval,
            workload,
            engines,
            registry,
            placement,
            directory: policy.uses_brokers().then(|| BrokerDirectory::new(segmentation)),
            brokers,
            queue: EventQueue::new(),
            net: NetworkModel::new(&cfg.network, sub_seed(cfg.seed, Stream::Network)),
            adversary: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, Stream::Adversary)),
            partition_seed: sub_seed(cfg.seed, Stream::Partition),
            tracks: BTreeMap::new(),
            records: BTreeMap::new(),
            proofs: BTreeMap::new(),
            malicious_broker: BTreeSet::new(),
            wallet: BTreeMap::new(),
            h_lock: cfg.provisional_h_lock(),
            calibrated: !matches!(cfg.h_lock, HLock::Auto),
            epoch: 0,
            reconfig_epoch: 0,
            round: 0,
            injected: 0,
            in_flight: 0,
            deposit_seq: 0,
            supply,
            epoch_blocks: Vec::new(),
            last_hashes,
            prev_state_block: None,
            metrics: MetricsSink::new(s),
            audit: AuditLog::default(),
            blocks: Vec::new(),
            epochs: Vec::new(),
            last_progress_round: 0,
            now: SimTime::ZERO,
        })
    }

    fn stall_limit(&self) -> u64 {
        4 * self.h_lock + 4 * self.cfg.epoch_blocks + 50
    }

    fn run(&mut self) {
        for (i, at) in inject_times(self.workload.len(), self.cfg.arrival_rate).into_iter().enumerate() {
            self.queue.push(at, EventKind::Inject(i));
        }
        self.schedule_round(self.interval);
        self.metrics.touch_epoch(0);
        while let Some(ev) = self.queue.pop() {
            debug_assert!(ev.at >= self.now, "time went backwards");
            self.now = ev.at;
            match ev.kind {
                EventKind::Inject(i) => self.inject(i),
                EventKind::Deliver { to, msg } => self.deliver(to, msg),
                EventKind::GammaRetry(id) => self.retry_gamma(id),
                EventKind::EpochBoundary => self.epoch_boundary(),
                EventKind::BlockTick(s) => {
                    self.tick(s);
                    if s.index() + 1 == self.engines.len() && !self.end_round() {
                        break;
                    }
                }
            }
        }
    }

    fn schedule_round(&mut self, at: SimTime) {
        for s in 0..self.engines.len() {
            self.queue.push(at, EventKind::BlockTick(ShardId(s as u32)));
        }
    }

    /// Returns false when the run is over.
    fn end_round(&mut self) -> bool {
        self.round += 1;
        let all_injected = self.injected == self.workload.len();
        if all_injected && self.quiescent() {
            return false;
        }
        if all_injected && self.round - self.last_progress_round > self.stall_limit() {
            info!(round = self.round, "stopping: no progress");
            return false;
        }
        let next = SimTime(self.now.0 + self.interval.0);
        if self.round.is_multiple_of(self.cfg.epoch_blocks) {
            self.queue.push(next, EventKind::EpochBoundary);
        }
        self.schedule_round(next);
        true
    }

    fn quiescent(&self) -> bool {
        self.in_flight == 0
            && self.tracks.values().all(|t| t.done)
            && self.records.values().all(|r| r.phase.is_terminal())
    }

    fn progress(&mut self) {
        self.last_progress_round = self.round;
    }

    fn send(&mut self, to: ShardId, msg: Message, extra: SimTime) {
        let at = SimTime(self.now.0 + self.net.delay().0 + extra.0);
        self.queue.push(at, EventKind::Deliver { to, msg });
    }

    /// Like `send`, but the message may be lost.
    fn send_lossy(&mut self, to: ShardId, msg: Message, extra: SimTime) {
        if self.net.drops() {
            self.metrics.ctx.dropped_messages += 1;
            return;
        }
        self.send(to, msg, extra);
    }

    fn next_nonce(&mut self, addr: Address, shard: ShardId) -> u64 {
        let key = (addr, self.registry.is_broker(&addr).then_some(shard));
        let slot = self.wallet.entry(key).or_insert(0);
        let n = *slot;
        *slot += 1;
        n
    }

    fn home(&self, addr: &Address) -> ShardId {
        self.registry.home(addr).expect("every workload account is placed")
    }

    fn inject(&mut self, i: usize) {
        let w = self.workload[i].clone();
        self.injected += 1;
        self.progress();
        let route = route_tx(&w.from, &w.to, w.value, &self.registry, self.directory.as_ref())
            .expect("every workload account is placed");
        let cross = !matches!(route, Route::Intra(_));
        self.metrics.record_injection(self.epoch, self.now, cross);
        self.tracks.insert(
            w.id,
            Track {
                injected_at: self.now,
                class: if cross { LatencyClass::Cross } else { LatencyClass::Intra },
                done: false,
            },
        );
        match route {
            Route::Intra(s) => {
                let nonce = self.next_nonce(w.from, s);
                let tx = Transaction::plain(w.id, w.from, w.to, w.value, nonce, self.now);
                self.send(s, Message::Tx(tx), SimTime::ZERO);
            }
            Route::Relay { source, .. } => {
                let nonce = self.next_nonce(w.from, source);
                let tx = monoxide_relay(w.id, w.from, w.to, w.value, nonce, self.now);
                self.send(source, Message::Tx(tx), SimTime::ZERO);
            }
            Route::Broker { source, dest, broker } => self.start_ctx(&w, source, dest, broker),
        }
    }

    /// Op1 and Op2: the payer signs Θ_raw, the broker stamps Θ1 and forwards
    /// it to both shards.
    fn start_ctx(&mut self, w: &WorkloadTx, source: ShardId, dest: ShardId, broker: Address) {
        let payer_balance = self.engines[source.index()].tree().get(&w.from).map_or(0, |a| a.value);
        if payer_balance < w.value {
            // The wallet does not sign what it cannot cover.
            self.reject(w.id);
            self.metrics.ctx.rejected += 1;
            return;
        }
        let dir = self.directory.as_mut().expect("broker policy");
        dir.reserve(&broker, dest, w.value).expect("selected broker covers the value");
        let payer_nonce = self.next_nonce(w.from, source);
        let broker_nonce = self.next_nonce(broker, dest);
        let raw = sign_raw_ctx(w.from, w.to, w.value, broker, self.h_lock, payer_nonce, broker_nonce);
        let h_current = self.engines[source.index()].height();
        let theta1 = create_theta1(raw.clone(), h_current).expect("payer signature is valid");
        let mut rec = CrossTxRecord::new(w.id, raw, source, dest, h_current, self.now);
        rec.trusted = self.cfg.trusted_brokers;
        let ctx_id = rec.ctx_id;
        rec.transition(CtxPhase::Theta1Pending, self.now, source, h_current, &mut self.audit)
            .expect("fresh record");
        self.metrics.ctx.created += 1;

        let adv = self.cfg.adversary;
        let mut theta1_delay = SimTime::ZERO;
        if adv.malicious_payer_prob > 0.0 && self.adversary.random_bool(adv.malicious_payer_prob) {
            // Threat 1: a same-nonce transfer reaches the source a block
            // ahead of Θ1.
            self.metrics.ctx.threat1_attempts += 1;
            let double = Transaction::plain(0, w.from, w.from, w.value, payer_nonce, self.now);
            self.send(source, Message::Tx(double), SimTime::ZERO);
            theta1_delay = self.interval;
        }
        if !rec.trusted && adv.malicious_broker_prob > 0.0 && self.adversary.random_bool(adv.malicious_broker_prob) {
            self.malicious_broker.insert(ctx_id);
        }

        self.send(source, Message::Tx(Transaction::theta1(w.id, theta1.clone(), self.now)), theta1_delay);
        let deadline = rec.deadline;
        self.send(dest, Message::Watch { theta1, source, deadline }, SimTime::ZERO);
        if rec.trusted {
            rec.transition(CtxPhase::Theta2Pending, self.now, source, h_current, &mut self.audit)
                .expect("trusted dispatch");
            self.records.insert(ctx_id, rec);
            self.dispatch_theta2(ctx_id, SimTime::ZERO);
        } else {
            self.records.insert(ctx_id, rec);
        }
    }

    /// Op4: the broker sends Θ2 to the destination.
    fn dispatch_theta2(&mut self, ctx_id: Digest, extra: SimTime) {
        let rec = &self.records[&ctx_id];
        let tx = Transaction::theta2(rec.tx_id, create_theta2(rec.raw.clone()), self.now);
        let dest = rec.dest;
        self.send_lossy(dest, Message::Tx(tx), extra);
    }

    fn deliver(&mut self, to: ShardId, msg: Message) {
        let engine = &mut self.engines[to.index()];
        match msg {
            Message::Tx(tx) => {
                // Application re-checks every condition and burns nonces, so
                // admission here only refuses duplicates.
                let _ = engine.enqueue(tx);
            }
            Message::Header(h) => engine.observe_header(&h),
            Message::Watch { theta1, source, deadline } => engine.watch_theta1(theta1, source, deadline),
            Message::Success(id) => engine.note_success(id),
        }
    }

    fn retry_gamma(&mut self, ctx_id: Digest) {
        let Some(rec) = self.records.get(&ctx_id) else { return };
        if rec.phase != CtxPhase::ProofSent {
            return;
        }
        let source = rec.source;
        let proof = self.proofs[&ctx_id].clone();
        self.metrics.ctx.gamma_retries += 1;
        self.send_lossy(source, Message::Tx(Transaction::failure_proof(0, proof, self.now)), SimTime::ZERO);
        self.queue.push(SimTime(self.now.0 + GAMMA_RETRY_BLOCKS * self.interval.0), EventKind::GammaRetry(ctx_id));
    }

    fn tick(&mut self, s: ShardId) {
        let out = self.engines[s.index()].produce_block(self.now);
        let height = out.block.header.height;
        self.metrics.record_workload(self.epoch, s, out.block.txs.len() as u64);
        self.metrics.record_pool(self.now, s, out.pool_size);
        self.blocks.push(BlockLogEntry::from_output(&out));
        self.last_hashes[s.index()] = out.block.hash();
        let header = out.block.header.clone();
        for other in 0..self.engines.len() {
            if other != s.index() {
                self.send(ShardId(other as u32), Message::Header(header.clone()), SimTime::ZERO);
            }
        }
        self.epoch_blocks.push(out.block);
        for effect in out.effects {
            self.handle_effect(s, height, effect);
        }
        self.audit_conservation();
    }

    fn audit_conservation(&mut self) {
        let held: Tokens = self.engines.iter().map(|e| e.tree().total_value() + e.tree().locked_value()).sum();
        self.metrics.conservation_checks += 1;
        if held + self.in_flight != self.supply {
            self.metrics.conservation_violations += 1;
            debug!(held, in_flight = self.in_flight, supply = self.supply, "conservation violated");
        }
    }

    fn complete(&mut self, tx_id: u64, confirmed: bool) {
        let Some(t) = self.tracks.get_mut(&tx_id) else { return };
        if t.done {
            return;
        }
        t.done = true;
        let (class, injected_at) = (t.class, t.injected_at);
        if confirmed {
            self.metrics.record_confirmation(tx_id, class, injected_at, self.now);
        } else {
            self.metrics.record_rejection();
        }
        self.progress();
    }

    fn reject(&mut self, tx_id: u64) {
        self.complete(tx_id, false);
    }

    /// Shard a misplaced transaction must move to, by the account it debits
    /// or credits.
    fn reroute_target(&self, tx: &Transaction) -> Option<ShardId> {
        match &tx.payload {
            TxPayload::None | TxPayload::Relay(RelayLeg::Deduct) => Some(self.home(&tx.from)),
            TxPayload::Relay(RelayLeg::Deposit) => Some(self.home(&tx.to)),
            TxPayload::Half(h) if h.kind == HalfKind::Type1 => Some(self.home(&h.raw.payer)),
            _ => None,
        }
    }

    /// Θ1 moved with its payer: the CTX's source changes and the destination
    /// learns the new source.
    fn theta1_moved(&mut self, tx: &Transaction, to: ShardId) {
        let Some(h) = tx.half() else { return };
        let ctx_id = h.raw.ctx_id();
        if let Some(rec) = self.records.get_mut(&ctx_id) {
            if rec.h_source.is_none() {
                rec.source = to;
                let (dest, deadline) = (rec.dest, rec.deadline);
                self.send(
                    dest,
                    Message::Watch {
                        theta1: h.clone(),
                        source: to,
                        deadline,
                    },
                    SimTime::ZERO,
                );
            }
        }
    }

    fn transition(&mut self, ctx_id: Digest, to: CtxPhase, shard: ShardId, height: BlockHeight) -> bool {
        let Some(rec) = self.records.get_mut(&ctx_id) else { return false };
        if !rec.phase.allows(to, rec.trusted) {
            return false;
        }
        rec.transition(to, self.now, shard, height, &mut self.audit).expect("checked");
        true
    }

    fn handle_effect(&mut self, s: ShardId, height: BlockHeight, effect: Effect) {
        match effect {
            Effect::Confirmed { tx_id } => self.complete(tx_id, true),
            Effect::Dropped { tx_id, reason, .. } => {
                debug!(shard = %s, tx_id, %reason, "dropped");
                self.reject(tx_id);
            }
            Effect::Forward { tx_id, to, value } => {
                self.in_flight += value;
                self.deposit_seq += 1;
                let dep = relay_deposit(tx_id, to, value, self.deposit_seq, self.now);
                let target = self.home(&to);
                self.send(target, Message::Tx(dep), SimTime::ZERO);
            }
            Effect::DepositIncluded { value, .. } => self.in_flight -= value,
            Effect::Reroute(tx) => {
                if let Some(target) = self.reroute_target(&tx) {
                    if tx.kind() == crate::ledger::TxKind::Theta1 {
                        self.theta1_moved(&tx, target);
                    }
                    self.send(target, Message::Tx(tx), SimTime::ZERO);
                }
            }
            Effect::Theta1Confirmed { ctx_id, height } => {
                let Some(rec) = self.records.get_mut(&ctx_id) else { return };
                if rec.source != s {
                    return;
                }
                rec.h_source = Some(height);
                if !self.transition(ctx_id, CtxPhase::Theta1Confirmed, s, height) {
                    return;
                }
                let dest = self.records[&ctx_id].dest;
                let mut extra = SimTime::ZERO;
                if self.malicious_broker.contains(&ctx_id) {
                    // Threat 2: the broker spends η_broker at the
                    // destination and sends Θ2 too late to win.
                    self.metrics.ctx.threat2_attempts += 1;
                    let raw = &self.records[&ctx_id].raw;
                    let double = Transaction::plain(0, raw.broker, raw.broker, raw.value, raw.broker_nonce, self.now);
                    self.send(dest, Message::Tx(double), SimTime::ZERO);
                    extra = SimTime(2 * self.interval.0);
                }
                self.transition(ctx_id, CtxPhase::Theta2Pending, s, height);
                self.dispatch_theta2(ctx_id, extra);
            }
            Effect::Theta1Rejected { ctx_id, reason } => debug!(shard = %s, ?ctx_id, %reason, "Θ1 rejected"),
            Effect::Theta2Rejected { ctx_id, reason } => debug!(shard = %s, ?ctx_id, %reason, "Θ2 rejected"),
            Effect::Theta2Confirmed { ctx_id } => {
                let Some(rec) = self.records.get_mut(&ctx_id) else { return };
                rec.theta2_confirmed = true;
                if rec.theta1_at_dest.is_some() {
                    self.metrics.ctx.exclusivity_violations += 1;
                }
                let (source, tx_id) = (rec.source, rec.tx_id);
                let bound = rec.resolution_bound();
                let lag = self.engines[source.index()].height() - self.engines[s.index()].known_height(source);
                self.metrics.ctx.max_header_lag = self.metrics.ctx.max_header_lag.max(lag);
                if self.transition(ctx_id, CtxPhase::Succeeded, s, height) {
                    self.metrics.ctx.succeeded += 1;
                    if self.engines[source.index()].height() > bound {
                        self.metrics.ctx.late += 1;
                    }
                    self.complete(tx_id, true);
                }
                self.send(source, Message::Success(ctx_id), SimTime::ZERO);
            }
            Effect::Theta1AtDest { ctx_id, proof, .. } => {
                let Some(rec) = self.records.get_mut(&ctx_id) else { return };
                rec.theta1_at_dest = Some(height);
                if rec.theta2_confirmed {
                    self.metrics.ctx.exclusivity_violations += 1;
                }
                let source = rec.source;
                for phase in [CtxPhase::FailureDetected, CtxPhase::Theta1AtDestConfirmed, CtxPhase::ProofSent] {
                    self.transition(ctx_id, phase, s, height);
                }
                self.proofs.insert(ctx_id, proof.clone());
                self.send_lossy(source, Message::Tx(Transaction::failure_proof(0, proof, self.now)), SimTime::ZERO);
                self.queue.push(
                    SimTime(self.now.0 + GAMMA_RETRY_BLOCKS * self.interval.0),
                    EventKind::GammaRetry(ctx_id),
                );
            }
            Effect::Refunded { ctx_id, amount } => {
                let Some(rec) = self.records.get(&ctx_id) else { return };
                if rec.source != s || rec.phase != CtxPhase::ProofSent {
                    return;
                }
                let (tx_id, broker, dest, value, bound) =
                    (rec.tx_id, rec.raw.broker, rec.dest, rec.raw.value, rec.resolution_bound());
                self.transition(ctx_id, CtxPhase::Refunded, s, height);
                self.records.get_mut(&ctx_id).expect("present").refunded = Some(amount);
                self.metrics.ctx.refunded += 1;
                if height > bound {
                    self.metrics.ctx.late += 1;
                }
                if let Some(dir) = self.directory.as_mut() {
                    dir.restore(&broker, dest, value);
                }
                self.complete(tx_id, true);
            }
            Effect::ProofRejected { ctx_id, reason } => debug!(shard = %s, ?ctx_id, %reason, "γ rejected"),
            Effect::Released { ctx_id, broker, amount } => {
                if let Some(dir) = self.directory.as_mut() {
                    dir.restore(&broker, s, amount);
                }
                if self.records.get(&ctx_id).is_some_and(|r| !r.theta2_confirmed) {
                    self.metrics.ctx.payee_losses += 1;
                }
            }
            Effect::LockOverdue { .. } => self.metrics.ctx.lock_overdue += 1,
        }
    }

    fn epoch_boundary(&mut self) {
        if !self.calibrated {
            self.calibrate();
        }
        let blocks = std::mem::take(&mut self.epoch_blocks);
        if self.policy.repartitions() && self.engines.len() > 1 {
            if let Err(e) = self.repartition(&blocks) {
                debug!(error = %e, "repartition skipped");
            }
        }
        self.epoch += 1;
        self.metrics.touch_epoch(self.epoch);
    }

    /// Replaces an `auto` lock duration with one derived from the mean
    /// latency of CTXs resolved so far.
    fn calibrate(&mut self) {
        let samples: Vec<f64> = self
            .metrics
            .latencies()
            .iter()
            .filter(|l| l.class == LatencyClass::Cross)
            .map(|l| l.latency().as_secs())
            .collect();
        if samples.is_empty() {
            return;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        if mean > 0.0 {
            self.h_lock = recommend_lock_duration(mean, self.cfg.block_interval_s);
        }
        self.calibrated = true;
        info!(h_lock = self.h_lock, mean_ctx_latency_s = mean, "lock duration calibrated");
    }

    fn repartition(&mut self, blocks: &[TxBlock]) -> Result<(), SimError> {
        let s = self.engines.len();
        let seed = self.partition_seed.wrapping_add(self.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let graph: StateGraph = build_state_graph(blocks, &self.brokers);
        let (fresh, cut, balanced) = match self.policy {
            Policy::BrokerChain => {
                let out = partition_graph(&graph, s, self.cfg.epsilon, seed)?;
                (out.map.assignment, out.cut, out.balanced)
            }
            Policy::MetisOnly => {
                let out = metis_only_policy(&graph, s, self.cfg.epsilon, seed)?;
                (out.map.assignment, out.cut, out.balanced)
            }
            Policy::Lbf => {
                let activity: BTreeMap<Address, u64> =
                    graph.vertices().filter(|(a, _)| !graph.is_broker(a)).map(|(a, w)| (*a, w)).collect();
                (lbf_reassign(&activity, s), 0, true)
            }
            Policy::Monoxide => return Ok(()),
        };
        let assignment = relabel_to_previous(&fresh, &self.placement, &graph, s);
        let trees: Vec<ShardStateTree> = self.engines.iter().map(|e| e.tree().clone()).collect();
        let block = build_state_block(
            self.reconfig_epoch,
            &assignment,
            &self.brokers,
            self.prev_state_block.as_ref(),
            self.last_hashes.clone(),
            &self.placement,
            &trees,
        );
        for m in &block.body.migrations {
            self.placement.insert(m.address, m.to);
            self.registry.place(m.address, m.to);
        }
        let mut moved = Vec::new();
        for e in &mut self.engines {
            moved.extend(e.reconfigure_state(&block)?);
        }
        for tx in moved {
            let Some(target) = self.reroute_target(&tx) else { continue };
            if tx.kind() == crate::ledger::TxKind::Theta1 {
                self.theta1_moved(&tx, target);
            }
            let _ = self.engines[target.index()].enqueue(tx);
        }
        self.epochs.push(EpochSummary {
            epoch: self.epoch,
            graph_vertices: graph.num_vertices(),
            cut,
            balanced,
            migrations: block.body.migrations.len(),
            state_block: block.hash(),
        });
        self.prev_state_block = Some(block);
        self.reconfig_epoch += 1;
        self.audit_conservation();
        Ok(())
    }

    fn finish(mut self) -> SimOutcome {
        for rec in self.records.values() {
            if !rec.phase.is_terminal() {
                self.metrics.ctx.unresolved += 1;
            }
            let locked = rec.h_source.is_some();
            if locked && rec.phase != CtxPhase::Succeeded && rec.refunded != Some(rec.raw.value) {
                self.metrics.ctx.payer_losses += 1;
            }
        }
        let header = ReportHeader {
            policy: self.policy.name().to_string(),
            shards: self.engines.len(),
            brokers: self.brokers.len(),
            seed: self.cfg.seed,
            epochs: self.epoch + 1,
            h_lock: self.h_lock,
            workload_digest: workload_digest(self.workload).to_hex(),
            sim_seconds: self.now.as_secs(),
        };
        SimOutcome {
            report: self.metrics.finish(header),
            metrics: self.metrics,
            audit: self.audit,
            blocks: self.blocks,
            records: self.records,
            epochs: self.epochs,
            brokers: self.brokers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_synthetic, Community, Popularity, WorkloadSource, WorkloadSpec};

    fn small(policy: Policy, shards: usize) -> (Config, Vec<WorkloadTx>) {
        let cfg = Config {
            policy,
            shards,
            brokers: 4,
            arrival_rate: 40.0,
            block_interval_s: 2.0,
            block_capacity: 60,
            epoch_blocks: 4,
            workload: WorkloadSpec {
                source: WorkloadSource::Synthetic {
                    n_accounts: 120,
                    n_txs: 600,
                    popularity: Popularity::Zipf { exponent: 1.0 },
                    community: Some(Community {
                        n_clusters: shards.max(1),
                        intra_prob: 0.8,
                    }),
                },
                seed: 0,
            },
            ..Config::default()
        };
        let txs = generate_synthetic(&cfg.resolved_workload()).unwrap();
        (cfg, txs)
    }

    #[test]
    fn single_shard_has_no_cross_shard_traffic() {
        let (cfg, txs) = small(Policy::BrokerChain, 1);
        let out = run_simulation(&cfg, &txs, Policy::BrokerChain).unwrap();
        assert_eq!(out.report.ctx_ratio, 0.0);
        assert_eq!(out.report.ctx.created, 0);
        assert_eq!(out.report.confirmed + out.report.rejected, out.report.injected);
        assert_eq!(out.report.conservation_violations, 0);
    }

    #[test]
    fn runs_repeat_bit_for_bit() {
        let (cfg, txs) = small(Policy::BrokerChain, 4);
        let a = run_simulation(&cfg, &txs, Policy::BrokerChain).unwrap();
        let b = run_simulation(&cfg, &txs, Policy::BrokerChain).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.report.digest(), b.report.digest());
    }

    #[test]
    fn every_policy_resolves_and_conserves() {
        for policy in Policy::ALL {
            let (cfg, txs) = small(policy, 4);
            let out = run_simulation(&cfg, &txs, policy).unwrap();
            let r = &out.report;
            assert_eq!(r.conservation_violations, 0, "{policy}");
            assert_eq!(r.pending, 0, "{policy}: {r:?}");
            assert_eq!(r.ctx.unresolved, 0, "{policy}");
            assert_eq!(r.ctx.exclusivity_violations, 0, "{policy}");
            assert!(r.confirmed > 0, "{policy}");
            assert_eq!(policy.uses_brokers(), r.ctx.created > 0, "{policy}");
        }
    }

    #[test]
    fn brokers_are_the_most_active_accounts() {
        let a = crate::workload::account_address(1);
        let b = crate::workload::account_address(2);
        let c = crate::workload::account_address(3);
        let tx = |id, from, to| WorkloadTx {
            id,
            timestamp_ms: id,
            from,
            to,
            value: 1,
        };
        let w = vec![tx(0, a, b), tx(1, a, c), tx(2, b, a)];
        assert_eq!(choose_brokers(&w, 1, 10), BTreeSet::from([a]));
        assert_eq!(choose_brokers(&w, 2, 10).len(), 2);
        assert!(choose_brokers(&w, 1, 1).len() == 1);
    }

    #[test]
    fn threats_never_cost_honest_parties() {
        let (mut cfg, txs) = small(Policy::BrokerChain, 4);
        cfg.adversary.malicious_payer_prob = 0.3;
        cfg.adversary.malicious_broker_prob = 0.3;
        let out = run_simulation(&cfg, &txs, Policy::BrokerChain).unwrap();
        let c = &out.report.ctx;
        assert!(c.threat1_attempts > 0 && c.threat2_attempts > 0);
        assert!(c.refunded > 0, "{c:?}");
        assert_eq!(c.payee_losses, 0);
        assert_eq!(c.payer_losses, 0);
        assert_eq!(c.exclusivity_violations, 0);
        assert_eq!(out.report.conservation_violations, 0);
    }
}
