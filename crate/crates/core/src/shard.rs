//! One M-shard: transaction pool, deterministic block production, per-kind
//! transaction application and epoch-boundary reconfiguration.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::broker::{
    build_failure_proof, confirm_failure_proof, confirm_theta1, confirm_theta2, credit_or_forward,
    include_theta1_at_dest, release_lock, validate_theta1, validate_theta2, BrokerError, Credit, CtxPhase,
    NonceOutcome, RefundOutcome,
};
use crate::digest::{Canonical, Digest};
use crate::ledger::{
    tx_root, Address, BlockHeader, BlockHeight, FailureProof, HalfKind, HalfTx, RelayLeg, ShardId, SimTime, Tokens,
    Transaction, TxBlock, TxKind, TxPayload,
};
use crate::msst::{AccountState, LockStatus, ShardStateTree, StateError, StorageMap};
use crate::partition::{state_updating_root, StateBlock};

const MAX_PASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShardConfig {
    pub block_interval: SimTime,
    pub capacity: usize,
}

impl Default for ShardConfig {
    fn default() -> Self {
        ShardConfig {
            block_interval: SimTime::from_secs(8.0),
            capacity: 2000,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("transaction already pooled")]
    Duplicate,
    #[error("account {0} is not stored in this shard")]
    Misrouted(Address),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShardError {
    #[error("block height {got} does not follow {expected}")]
    HeightGap { expected: BlockHeight, got: BlockHeight },
    #[error("migration payload does not match the state block")]
    InconsistentMigration,
    #[error("transaction {index} of block {height} does not apply")]
    InvalidTransaction { height: BlockHeight, index: usize },
    #[error("state block for epoch {got}, engine is in epoch {expected}")]
    WrongEpoch { expected: u64, got: u64 },
}

/// Priority class: failure proofs, then cross-shard halves and relays, then
/// plain transfers.
fn priority(tx: &Transaction) -> usize {
    match tx.kind() {
        TxKind::FailureProof => 0,
        TxKind::Theta1 | TxKind::Theta2 | TxKind::Relay => 1,
        TxKind::Plain => 2,
    }
}

/// FIFO per priority class, no duplicate digests.
#[derive(Debug, Clone, Default)]
pub struct TxPool {
    classes: [VecDeque<(Digest, Transaction)>; 3],
    pooled: HashSet<Digest>,
}

impl TxPool {
    pub fn submit(&mut self, tx: Transaction) -> Result<(), PoolError> {
        let d = tx.digest();
        if !self.pooled.insert(d) {
            return Err(PoolError::Duplicate);
        }
        self.classes[priority(&tx)].push_back((d, tx));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pooled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pooled.is_empty()
    }

    fn pop(&mut self) -> Option<(Digest, Transaction)> {
        self.classes.iter_mut().find_map(VecDeque::pop_front)
    }

    /// Puts deferred transactions back at the head of their classes, keeping
    /// their relative order.
    fn restore_front(&mut self, deferred: Vec<(Digest, Transaction)>) {
        for item in deferred.into_iter().rev() {
            self.classes[priority(&item.1)].push_front(item);
        }
    }

    fn forget(&mut self, d: &Digest) {
        self.pooled.remove(d);
    }

    /// Transactions in drain order.
    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.classes.iter().flat_map(|c| c.iter().map(|(_, tx)| tx))
    }

    /// Removes every transaction matching `pred`, in drain order.
    pub fn extract(&mut self, mut pred: impl FnMut(&Transaction) -> bool) -> Vec<Transaction> {
        let mut out = Vec::new();
        for class in &mut self.classes {
            let mut keep = VecDeque::with_capacity(class.len());
            for (d, tx) in class.drain(..) {
                if pred(&tx) {
                    self.pooled.remove(&d);
                    out.push(tx);
                } else {
                    keep.push_back((d, tx));
                }
            }
            *class = keep;
        }
        out
    }
}

/// Everything a produced block caused that other shards or the harness must
/// act on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    /// Plain transfer (or relay deposit) fully applied.
    Confirmed { tx_id: u64 },
    /// A credit whose account is not stored here; `tx_id` is nonzero when
    /// the transaction's confirmation waits on the deposit.
    Forward { tx_id: u64, to: Address, value: Tokens },
    /// A relay deposit credited here.
    DepositIncluded { tx_id: u64, value: Tokens },
    /// The transaction's account left this shard; route it again.
    Reroute(Transaction),
    /// Dropped at application: stale nonce, insufficient balance, etc.
    Dropped { tx_id: u64, kind: TxKind, reason: String },
    Theta1Confirmed { ctx_id: Digest, height: BlockHeight },
    Theta1Rejected { ctx_id: Digest, reason: String },
    Theta2Confirmed { ctx_id: Digest },
    Theta2Rejected { ctx_id: Digest, reason: String },
    /// Θ1 included here on the failure path; the proof is ready to send.
    Theta1AtDest { ctx_id: Digest, proof: FailureProof, nonce: NonceOutcome },
    Refunded { ctx_id: Digest, amount: Tokens },
    ProofRejected { ctx_id: Digest, reason: String },
    Released { ctx_id: Digest, broker: Address, amount: Tokens },
    /// Lock window passed without success or refund.
    LockOverdue { ctx_id: Digest },
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub block: TxBlock,
    pub effects: Vec<Effect>,
    pub pool_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DestOutcome {
    Theta2,
    Theta1AtDest,
}

#[derive(Debug, Clone)]
struct Watch {
    theta1: HalfTx,
    source: ShardId,
    deadline: BlockHeight,
}

enum Applied {
    Included(Vec<Effect>),
    /// Not included; may still carry effects (burned nonce, rejection).
    Dropped(Vec<Effect>),
    Deferred,
}

#[derive(Debug, Clone)]
pub struct ShardEngine {
    shard: ShardId,
    num_shards: usize,
    pub config: ShardConfig,
    chain: Vec<BlockHeader>,
    tree: ShardStateTree,
    pool: TxPool,
    known_heights: Vec<BlockHeight>,
    known_roots: HashMap<(ShardId, BlockHeight), Digest>,
    watch: BTreeMap<Digest, Watch>,
    dest_done: BTreeMap<Digest, DestOutcome>,
    succeeded: BTreeSet<Digest>,
    overdue: BTreeSet<Digest>,
    epoch: u64,
}

impl ShardEngine {
    /// Creates the shard and its genesis block at height 0.
    pub fn new(shard: ShardId, num_shards: usize, config: ShardConfig, tree: ShardStateTree) -> Self {
        let mut engine = ShardEngine {
            shard,
            num_shards,
            config,
            chain: Vec::new(),
            tree,
            pool: TxPool::default(),
            known_heights: vec![0; num_shards],
            known_roots: HashMap::new(),
            watch: BTreeMap::new(),
            dest_done: BTreeMap::new(),
            succeeded: BTreeSet::new(),
            overdue: BTreeSet::new(),
            epoch: 0,
        };
        let genesis = engine.seal(Vec::new(), SimTime::ZERO);
        engine.observe_header(&genesis.header);
        engine
    }

    pub fn shard(&self) -> ShardId {
        self.shard
    }

    pub fn tree(&self) -> &ShardStateTree {
        &self.tree
    }

    pub fn tree_mut(&mut self) -> &mut ShardStateTree {
        &mut self.tree
    }

    pub fn pool(&self) -> &TxPool {
        &self.pool
    }

    pub fn chain(&self) -> &[BlockHeader] {
        &self.chain
    }

    pub fn height(&self) -> BlockHeight {
        self.chain.len() as BlockHeight - 1
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn known_height(&self, shard: ShardId) -> BlockHeight {
        self.known_heights[shard.index()]
    }

    pub fn dest_outcome(&self, ctx_id: &Digest) -> Option<DestOutcome> {
        self.dest_done.get(ctx_id).copied()
    }

    /// Header gossip from any shard, including this one.
    pub fn observe_header(&mut self, header: &BlockHeader) {
        let h = &mut self.known_heights[header.shard.index()];
        *h = (*h).max(header.height);
        self.known_roots.insert((header.shard, header.height), header.tx_root);
    }

    /// The CTX succeeded, so its lock here may be released after the window.
    pub fn note_success(&mut self, ctx_id: Digest) {
        self.succeeded.insert(ctx_id);
    }

    /// Θ1 forwarded to this shard as destination, kept until Θ2 confirms or
    /// the deadline passes.
    pub fn watch_theta1(&mut self, theta1: HalfTx, source: ShardId, deadline: BlockHeight) {
        let ctx_id = theta1.raw.ctx_id();
        if !self.dest_done.contains_key(&ctx_id) {
            self.watch.insert(ctx_id, Watch { theta1, source, deadline });
        }
    }

    /// Admission with kind-specific validation.
    pub fn submit_tx(&mut self, tx: Transaction) -> Result<(), PoolError> {
        let invalid = |e: &dyn std::fmt::Display| PoolError::ValidationFailed(e.to_string());
        match &tx.payload {
            TxPayload::None | TxPayload::Relay(RelayLeg::Deduct) => {
                let acc = self.tree.get(&tx.from).ok_or(PoolError::Misrouted(tx.from))?;
                if tx.nonce < acc.nonce {
                    return Err(invalid(&StateError::NonceMismatch {
                        expected: tx.nonce,
                        actual: acc.nonce,
                    }));
                }
            }
            TxPayload::Relay(RelayLeg::Deposit) => {
                if !self.tree.contains(&tx.to) {
                    return Err(PoolError::Misrouted(tx.to));
                }
            }
            TxPayload::Half(h) => {
                let res = match h.kind {
                    HalfKind::Type1 => {
                        if !self.tree.contains(&h.raw.payer) {
                            return Err(PoolError::Misrouted(h.raw.payer));
                        }
                        validate_theta1(&self.tree, h)
                    }
                    HalfKind::Type2 => validate_theta2(&self.tree, h),
                };
                res.map_err(|e| invalid(&e))?;
            }
            TxPayload::Proof(p) => {
                if !p.theta1.verify_broker() {
                    return Err(invalid(&BrokerError::BadProof));
                }
            }
            TxPayload::Theta1AtDest(_) => {
                return Err(PoolError::ValidationFailed("Θ1 at the destination is not pooled".into()))
            }
        }
        self.pool.submit(tx)
    }

    /// Accepts a transaction without validation (re-routed or system
    /// generated); duplicates are still refused.
    pub fn enqueue(&mut self, tx: Transaction) -> Result<(), PoolError> {
        self.pool.submit(tx)
    }

    fn seal(&mut self, txs: Vec<Transaction>, now: SimTime) -> TxBlock {
        let digests: Vec<Digest> = txs.iter().map(Canonical::digest).collect();
        let header = BlockHeader {
            shard: self.shard,
            height: self.chain.len() as BlockHeight,
            prev_hash: self.chain.last().map_or(Digest::ZERO, Canonical::digest),
            tx_root: tx_root(&digests),
            state_root: self.tree.state_root(),
            produced_at: now,
        };
        self.chain.push(header.clone());
        TxBlock { header, txs }
    }

    /// Nonce gate shared by every payer-signed debit: `Ok(())` when the
    /// nonce is next, otherwise the outcome for the transaction.
    fn nonce_gate(&self, addr: &Address, nonce: u64) -> Result<(), Applied> {
        let actual = self.tree.get(addr).map_or(0, |a| a.nonce);
        match nonce.cmp(&actual) {
            std::cmp::Ordering::Equal => Ok(()),
            std::cmp::Ordering::Greater => Err(Applied::Deferred),
            std::cmp::Ordering::Less => Err(Applied::Dropped(Vec::new())),
        }
    }

    fn burn(&mut self, addr: &Address, nonce: u64) {
        let _ = self.tree.consume_nonce(addr, nonce);
    }

    fn apply_tx(&mut self, tx: &Transaction, height: BlockHeight) -> Applied {
        let dropped = |reason: String| Effect::Dropped {
            tx_id: tx.id,
            kind: tx.kind(),
            reason,
        };
        match &tx.payload {
            TxPayload::None | TxPayload::Relay(RelayLeg::Deduct) => {
                if !self.tree.contains(&tx.from) {
                    return Applied::Dropped(vec![Effect::Reroute(tx.clone())]);
                }
                if let Err(outcome) = self.nonce_gate(&tx.from, tx.nonce) {
                    return match outcome {
                        Applied::Dropped(_) => Applied::Dropped(vec![dropped("stale nonce".into())]),
                        other => other,
                    };
                }
                if let Err(e) = self.tree.debit(&tx.from, tx.value, tx.nonce) {
                    self.burn(&tx.from, tx.nonce);
                    return Applied::Dropped(vec![dropped(e.to_string())]);
                }
                let relay = matches!(tx.payload, TxPayload::Relay(_));
                let effect = if relay && !self.tree.contains(&tx.to) {
                    Effect::Forward {
                        tx_id: tx.id,
                        to: tx.to,
                        value: tx.value,
                    }
                } else {
                    match credit_or_forward(&mut self.tree, &tx.to, tx.value) {
                        Credit::Applied => Effect::Confirmed { tx_id: tx.id },
                        Credit::Forward { to, value } => Effect::Forward { tx_id: tx.id, to, value },
                    }
                };
                Applied::Included(vec![effect])
            }
            TxPayload::Relay(RelayLeg::Deposit) => {
                if !self.tree.contains(&tx.to) {
                    return Applied::Dropped(vec![Effect::Reroute(tx.clone())]);
                }
                self.tree.credit(&tx.to, tx.value).expect("account present");
                let mut effects = vec![Effect::DepositIncluded {
                    tx_id: tx.id,
                    value: tx.value,
                }];
                if tx.id != 0 {
                    effects.push(Effect::Confirmed { tx_id: tx.id });
                }
                Applied::Included(effects)
            }
            TxPayload::Half(h) if h.kind == HalfKind::Type1 => self.apply_theta1(tx, h, height),
            TxPayload::Half(h) => self.apply_theta2(h),
            TxPayload::Proof(p) => self.apply_proof(p, height),
            TxPayload::Theta1AtDest(_) => Applied::Dropped(vec![dropped("not a pool transaction".into())]),
        }
    }

    fn apply_theta1(&mut self, tx: &Transaction, h: &HalfTx, height: BlockHeight) -> Applied {
        let raw = &h.raw;
        let ctx_id = raw.ctx_id();
        if !self.tree.contains(&raw.payer) {
            return Applied::Dropped(vec![Effect::Reroute(tx.clone())]);
        }
        let rejected = |reason: String| Effect::Theta1Rejected { ctx_id, reason };
        if let Err(outcome) = self.nonce_gate(&raw.payer, raw.payer_nonce) {
            return match outcome {
                Applied::Dropped(_) => Applied::Dropped(vec![rejected("payer nonce already used".into())]),
                other => other,
            };
        }
        match confirm_theta1(&mut self.tree, h, height) {
            Ok(_) => Applied::Included(vec![Effect::Theta1Confirmed { ctx_id, height }]),
            Err(e) => {
                self.burn(&raw.payer, raw.payer_nonce);
                Applied::Dropped(vec![rejected(e.to_string())])
            }
        }
    }

    fn apply_theta2(&mut self, h: &HalfTx) -> Applied {
        let raw = &h.raw;
        let ctx_id = raw.ctx_id();
        let rejected = |reason: String| Effect::Theta2Rejected { ctx_id, reason };
        if self.dest_done.contains_key(&ctx_id) {
            return Applied::Dropped(vec![rejected(BrokerError::AlreadyResolved.to_string())]);
        }
        let Some(w) = self.watch.get(&ctx_id) else {
            // Θ1 carries the deadline; wait for it.
            return Applied::Deferred;
        };
        let (known, deadline) = (self.known_height(w.source), w.deadline);
        if known >= deadline {
            return Applied::Dropped(vec![rejected(
                BrokerError::DeadlineExceeded { known, deadline }.to_string(),
            )]);
        }
        if let Err(outcome) = self.nonce_gate(&raw.broker, raw.broker_nonce) {
            return match outcome {
                Applied::Dropped(_) => Applied::Dropped(vec![rejected("broker nonce already used".into())]),
                other => other,
            };
        }
        match confirm_theta2(&mut self.tree, h, known, deadline) {
            Ok(credit) => {
                self.dest_done.insert(ctx_id, DestOutcome::Theta2);
                self.watch.remove(&ctx_id);
                let mut effects = vec![Effect::Theta2Confirmed { ctx_id }];
                if let Credit::Forward { to, value } = credit {
                    effects.push(Effect::Forward { tx_id: 0, to, value });
                }
                Applied::Included(effects)
            }
            Err(e) => {
                self.burn(&raw.broker, raw.broker_nonce);
                Applied::Dropped(vec![rejected(e.to_string())])
            }
        }
    }

    fn apply_proof(&mut self, gamma: &FailureProof, height: BlockHeight) -> Applied {
        let ctx_id = gamma.theta1.raw.ctx_id();
        let Some(root) = self.known_roots.get(&(gamma.dest, gamma.dest_height)).copied() else {
            // Destination header not gossiped here yet.
            return Applied::Deferred;
        };
        match confirm_failure_proof(&mut self.tree, gamma, &root, height) {
            Ok(RefundOutcome::Refunded { amount, credit }) => {
                let mut effects = vec![Effect::Refunded { ctx_id, amount }];
                if let Credit::Forward { to, value } = credit {
                    effects.push(Effect::Forward { tx_id: 0, to, value });
                }
                Applied::Included(effects)
            }
            Ok(RefundOutcome::Cancelled) => Applied::Included(vec![Effect::Refunded { ctx_id, amount: 0 }]),
            Err(e) => Applied::Dropped(vec![Effect::ProofRejected {
                ctx_id,
                reason: e.to_string(),
            }]),
        }
    }

    /// Includes Θ1 for every watched CTX whose deadline the latest known
    /// source height has reached.
    fn failure_pass(&mut self, included: &mut Vec<Transaction>, pending_proofs: &mut Vec<(Digest, HalfTx, NonceOutcome)>) {
        let due: Vec<Digest> = self
            .watch
            .iter()
            .filter(|(_, w)| self.known_height(w.source) >= w.deadline)
            .map(|(id, _)| *id)
            .collect();
        for ctx_id in due {
            let theta1 = self.watch[&ctx_id].theta1.clone();
            match include_theta1_at_dest(&mut self.tree, &theta1, false) {
                Ok(outcome) => {
                    self.watch.remove(&ctx_id);
                    self.dest_done.insert(ctx_id, DestOutcome::Theta1AtDest);
                    included.push(Transaction::theta1_at_dest(theta1.clone()));
                    pending_proofs.push((ctx_id, theta1, outcome));
                }
                Err(BrokerError::NonceNotReached { .. }) => {}
                Err(e) => {
                    debug!(shard = %self.shard, ?ctx_id, error = %e, "Θ1 at destination not includable");
                    self.watch.remove(&ctx_id);
                }
            }
        }
    }

    fn release_pass(&mut self, height: BlockHeight, effects: &mut Vec<Effect>) {
        let expired: Vec<(Digest, Address, u128)> = self
            .tree
            .locks()
            .filter(|l| l.status == LockStatus::Locked && l.lock_end < height)
            .map(|l| (l.ctx_id, l.owner_broker, l.amount))
            .collect();
        for (ctx_id, broker, amount) in expired {
            if self.succeeded.contains(&ctx_id) {
                release_lock(&mut self.tree, &ctx_id, height, CtxPhase::Succeeded).expect("lock checked above");
                effects.push(Effect::Released { ctx_id, broker, amount });
            } else if self.overdue.insert(ctx_id) {
                effects.push(Effect::LockOverdue { ctx_id });
            }
        }
    }

    /// Drains up to `capacity` transactions in priority and FIFO order,
    /// applies them, and seals the next block.
    pub fn produce_block(&mut self, now: SimTime) -> BlockOutput {
        let height = self.chain.len() as BlockHeight;
        let mut included = Vec::new();
        let mut effects = Vec::new();
        let mut proofs = Vec::new();

        self.failure_pass(&mut included, &mut proofs);

        let mut deferred: Vec<(Digest, Transaction)> = Vec::new();
        let mut first = true;
        for _ in 0..MAX_PASSES {
            let mut progressed = false;
            let mut next_deferred = Vec::new();
            let mut candidates = std::mem::take(&mut deferred).into_iter();
            loop {
                if included.len() >= self.config.capacity {
                    next_deferred.extend(candidates.by_ref());
                    break;
                }
                let item = match candidates.next() {
                    Some(item) => item,
                    None if first => match self.pool.pop() {
                        Some(item) => item,
                        None => break,
                    },
                    None => break,
                };
                match self.apply_tx(&item.1, height) {
                    Applied::Included(e) => {
                        self.pool.forget(&item.0);
                        effects.extend(e);
                        included.push(item.1);
                        progressed = true;
                    }
                    Applied::Dropped(e) => {
                        self.pool.forget(&item.0);
                        effects.extend(e);
                        progressed = true;
                    }
                    Applied::Deferred => next_deferred.push(item),
                }
            }
            first = false;
            deferred = next_deferred;
            if !progressed || deferred.is_empty() || included.len() >= self.config.capacity {
                break;
            }
            // Nonces may have advanced; Θ1 at the destination may now fit.
            self.failure_pass(&mut included, &mut proofs);
        }
        self.pool.restore_front(deferred);
        self.failure_pass(&mut included, &mut proofs);
        self.release_pass(height, &mut effects);

        let block = self.seal(included, now);
        let header = block.header.clone();
        self.observe_header(&header);
        for (ctx_id, theta1, nonce) in proofs {
            let proof = build_failure_proof(&block, &theta1).expect("Θ1 included in this block");
            effects.push(Effect::Theta1AtDest { ctx_id, proof, nonce });
        }
        BlockOutput {
            block,
            effects,
            pool_size: self.pool.len(),
        }
    }

    /// Re-applies a sealed block to `tree`, checking height contiguity and
    /// that every included transaction is valid against the replayed state.
    /// Failure proofs and lock releases depend on gossip and are not replayed.
    pub fn apply_block(tree: &mut ShardStateTree, expected_height: BlockHeight, block: &TxBlock) -> Result<(), ShardError> {
        if block.header.height != expected_height {
            return Err(ShardError::HeightGap {
                expected: expected_height,
                got: block.header.height,
            });
        }
        for (index, tx) in block.txs.iter().enumerate() {
            let ok = match &tx.payload {
                TxPayload::None | TxPayload::Relay(RelayLeg::Deduct) => {
                    let res = tree.debit(&tx.from, tx.value, tx.nonce);
                    if res.is_ok() && tree.contains(&tx.to) && matches!(tx.payload, TxPayload::None) {
                        tree.credit(&tx.to, tx.value).expect("account present");
                    }
                    res.is_ok()
                }
                TxPayload::Relay(RelayLeg::Deposit) => tree.credit(&tx.to, tx.value).is_ok(),
                TxPayload::Half(h) if h.kind == HalfKind::Type1 => confirm_theta1(tree, h, block.header.height).is_ok(),
                TxPayload::Half(h) => {
                    let res = tree.debit(&h.raw.broker, h.raw.value, h.raw.broker_nonce);
                    if res.is_ok() {
                        credit_or_forward(tree, &h.raw.payee, h.raw.value);
                    }
                    res.is_ok()
                }
                TxPayload::Theta1AtDest(h) => include_theta1_at_dest(tree, h, false).is_ok(),
                TxPayload::Proof(_) => true,
            };
            if !ok {
                return Err(ShardError::InvalidTransaction { height: block.header.height, index });
            }
        }
        Ok(())
    }

    /// Phase 4: apply the state block's migrations to this shard and hand
    /// back pooled transactions that must follow their accounts.
    pub fn reconfigure_state(&mut self, state_block: &StateBlock) -> Result<Vec<Transaction>, ShardError> {
        if state_block.header.epoch != self.epoch {
            return Err(ShardError::WrongEpoch {
                expected: self.epoch,
                got: state_block.header.epoch,
            });
        }
        if state_updating_root(&state_block.body.migrations) != state_block.header.state_updating_root {
            return Err(ShardError::InconsistentMigration);
        }
        for m in &state_block.body.migrations {
            if m.from == self.shard {
                let current = self.tree.get(&m.address).ok_or(ShardError::InconsistentMigration)?;
                if *current != m.carried {
                    return Err(ShardError::InconsistentMigration);
                }
            }
        }
        for m in &state_block.body.migrations {
            if m.from == self.shard {
                self.tree.remove(&m.address).expect("checked above");
            }
            if m.to == self.shard {
                let mut state: AccountState = m.carried.clone();
                state.storage_map = StorageMap::single(self.num_shards, self.shard);
                self.tree.insert(state).map_err(|_| ShardError::InconsistentMigration)?;
            }
        }
        self.epoch += 1;
        let tree = &self.tree;
        let moved = self.pool.extract(|tx| match &tx.payload {
            TxPayload::None | TxPayload::Relay(RelayLeg::Deduct) => !tree.contains(&tx.from),
            TxPayload::Relay(RelayLeg::Deposit) => !tree.contains(&tx.to),
            TxPayload::Half(h) if h.kind == HalfKind::Type1 => !tree.contains(&h.raw.payer),
            _ => false,
        });
        Ok(moved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLogEntry {
    pub sim_time: SimTime,
    pub shard: ShardId,
    pub height: BlockHeight,
    pub n_txs: usize,
    pub pool_size: usize,
    pub state_root_prefix: String,
}

impl BlockLogEntry {
    pub fn from_output(out: &BlockOutput) -> Self {
        let h = &out.block.header;
        BlockLogEntry {
            sim_time: h.produced_at,
            shard: h.shard,
            height: h.height,
            n_txs: out.block.txs.len(),
            pool_size: out.pool_size,
            state_root_prefix: h.state_root.short(16),
        }
    }
}

pub fn write_block_log<W: Write>(entries: &[BlockLogEntry], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sim_time", "shard", "height", "n_txs", "pool_size", "state_root_prefix"])?;
    for e in entries {
        w.write_record([
            format!("{:.3}", e.sim_time.as_ms()),
            e.shard.0.to_string(),
            e.height.to_string(),
            e.n_txs.to_string(),
            e.pool_size.to_string(),
            e.state_root_prefix.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{create_theta1, create_theta2, sign_raw_ctx, theta2_deadline};
    use crate::msst::compute_state_root;
    use crate::partition::build_state_block;

    const N: usize = 2;

    fn addr(b: u8) -> Address {
        Address([b; 20])
    }

    fn engine(shard: u32, accounts: &[(Address, Tokens)], brokers: &[(Address, Tokens)], capacity: usize) -> ShardEngine {
        let s = ShardId(shard);
        let mut tree = ShardStateTree::new(s);
        for (a, v) in accounts {
            tree.insert(AccountState::new(*a, StorageMap::single(N, s), *v)).unwrap();
        }
        for (b, v) in brokers {
            tree.insert(AccountState::new(*b, StorageMap::all(N), *v)).unwrap();
        }
        ShardEngine::new(
            s,
            N,
            ShardConfig {
                block_interval: SimTime::from_secs(8.0),
                capacity,
            },
            tree,
        )
    }

    fn plain(id: u64, from: Address, to: Address, value: Tokens, nonce: u64) -> Transaction {
        Transaction::plain(id, from, to, value, nonce, SimTime::ZERO)
    }

    #[test]
    fn pool_admission_and_priority() {
        let (a, b) = (addr(1), addr(2));
        let mut e = engine(0, &[(a, 1_000_000), (b, 0)], &[], 2000);
        let tx = plain(1, a, b, 1, 0);
        e.submit_tx(tx.clone()).unwrap();
        assert_eq!(e.submit_tx(tx), Err(PoolError::Duplicate));
        assert_eq!(e.submit_tx(plain(2, addr(9), b, 1, 0)), Err(PoolError::Misrouted(addr(9))));
        assert!(e.tree().get(&a).is_some());
    }

    #[test]
    fn genesis_and_empty_block() {
        let mut e = engine(0, &[(addr(1), 5)], &[], 10);
        assert_eq!(e.height(), 0);
        let out = e.produce_block(SimTime::from_secs(8.0));
        assert_eq!(out.block.header.height, 1);
        assert!(out.block.txs.is_empty());
        assert_eq!(out.block.header.prev_hash, e.chain()[0].digest());
    }

    #[test]
    fn capacity_limits_block() {
        let (a, b) = (addr(1), addr(2));
        let mut e = engine(0, &[(a, 1_000_000), (b, 0)], &[], 2000);
        for i in 0..2500 {
            e.submit_tx(plain(i + 1, a, b, 1, i)).unwrap();
        }
        let out = e.produce_block(SimTime::from_secs(8.0));
        assert_eq!(out.block.txs.len(), 2000);
        assert_eq!(out.pool_size, 500);
        assert_eq!(e.tree().get(&b).unwrap().value, 2000);
        assert_eq!(out.block.recompute_tx_root(), out.block.header.tx_root);
        assert_eq!(out.block.header.state_root, compute_state_root(e.tree()));
    }

    #[test]
    fn out_of_order_nonces_fill_one_block() {
        let (a, b) = (addr(1), addr(2));
        let mut e = engine(0, &[(a, 100), (b, 0)], &[], 10);
        e.submit_tx(plain(2, a, b, 1, 1)).unwrap();
        e.submit_tx(plain(1, a, b, 1, 0)).unwrap();
        let out = e.produce_block(SimTime::from_secs(8.0));
        assert_eq!(out.block.txs.len(), 2);
        assert_eq!(e.tree().get(&a).unwrap().nonce, 2);
    }

    #[test]
    fn stale_and_overdrawn_transactions_are_skipped() {
        let (a, b) = (addr(1), addr(2));
        let mut e = engine(0, &[(a, 5), (b, 0)], &[], 10);
        e.enqueue(plain(1, a, b, 6, 0)).unwrap();
        e.enqueue(plain(2, a, b, 1, 0)).unwrap();
        e.enqueue(plain(3, a, b, 1, 1)).unwrap();
        let out = e.produce_block(SimTime::from_secs(8.0));
        assert_eq!(out.block.txs.len(), 1);
        assert_eq!(out.block.txs[0].id, 3);
        let drops = out.effects.iter().filter(|x| matches!(x, Effect::Dropped { .. })).count();
        assert_eq!(drops, 2);
    }

    #[test]
    fn failure_proof_outranks_backlog() {
        let (payer, payee, broker) = (addr(0xa), addr(0xb), addr(0xc));
        let mut src = engine(0, &[(payer, 100)], &[(broker, 1000)], 3);
        let mut dst = engine(1, &[(payee, 0)], &[(broker, 1000)], 3);
        let raw = sign_raw_ctx(payer, payee, 10, broker, 4, 0, 0);
        let t1 = create_theta1(raw.clone(), 0).unwrap();
        src.submit_tx(Transaction::theta1(1, t1.clone(), SimTime::ZERO)).unwrap();
        let out = src.produce_block(SimTime::from_secs(8.0));
        assert!(out.effects.contains(&Effect::Theta1Confirmed {
            ctx_id: raw.ctx_id(),
            height: 1
        }));
        dst.watch_theta1(t1, ShardId(0), theta2_deadline(0, 4));

        // Θ2 never arrives. Once the destination learns source height 2 the
        // deadline has passed.
        let h2 = src.produce_block(SimTime::from_secs(16.0)).block.header;
        dst.observe_header(&h2);
        let out = dst.produce_block(SimTime::from_secs(16.0));
        let proof = out
            .effects
            .iter()
            .find_map(|x| match x {
                Effect::Theta1AtDest { proof, nonce, .. } => {
                    assert_eq!(*nonce, NonceOutcome::Consumed);
                    Some(proof.clone())
                }
                _ => None,
            })
            .unwrap();
        assert_eq!(dst.dest_outcome(&raw.ctx_id()), Some(DestOutcome::Theta1AtDest));

        // A late Θ2 is refused.
        dst.enqueue(Transaction::theta2(1, create_theta2(raw.clone()), SimTime::ZERO)).unwrap();
        let out = dst.produce_block(SimTime::from_secs(24.0));
        assert!(out.block.txs.is_empty());

        // γ jumps a 1000-deep backlog at the source.
        for i in 0..1000 {
            src.enqueue(plain(100 + i, payer, payer, 0, 1 + i)).unwrap();
        }
        src.observe_header(&dst.chain()[1]);
        src.enqueue(Transaction::failure_proof(1, proof, SimTime::ZERO)).unwrap();
        let out = src.produce_block(SimTime::from_secs(24.0));
        assert_eq!(out.block.txs[0].kind(), TxKind::FailureProof);
        assert!(out.effects.contains(&Effect::Refunded {
            ctx_id: raw.ctx_id(),
            amount: 10
        }));
        assert_eq!(src.tree().get(&payer).unwrap().value, 100);
    }

    #[test]
    fn success_then_release_after_window() {
        let (payer, payee, broker) = (addr(0xa), addr(0xb), addr(0xc));
        let mut src = engine(0, &[(payer, 100)], &[(broker, 1000)], 10);
        let mut dst = engine(1, &[(payee, 0)], &[(broker, 1000)], 10);
        let raw = sign_raw_ctx(payer, payee, 10, broker, 4, 0, 0);
        let t1 = create_theta1(raw.clone(), 0).unwrap();
        dst.watch_theta1(t1.clone(), ShardId(0), theta2_deadline(0, 4));
        src.submit_tx(Transaction::theta1(1, t1, SimTime::ZERO)).unwrap();
        src.produce_block(SimTime::from_secs(8.0));
        dst.submit_tx(Transaction::theta2(1, create_theta2(raw.clone()), SimTime::ZERO)).unwrap();
        let out = dst.produce_block(SimTime::from_secs(8.0));
        assert!(out.effects.contains(&Effect::Theta2Confirmed { ctx_id: raw.ctx_id() }));
        assert_eq!(dst.tree().get(&payee).unwrap().value, 10);
        src.note_success(raw.ctx_id());
        // Lock spans [1, 5]; release lands in block 6.
        for h in 2..=5 {
            let out = src.produce_block(SimTime::from_secs(8.0 * h as f64));
            assert!(out.effects.is_empty(), "height {h}");
        }
        let out = src.produce_block(SimTime::from_secs(48.0));
        assert_eq!(
            out.effects,
            vec![Effect::Released {
                ctx_id: raw.ctx_id(),
                broker,
                amount: 10
            }]
        );
        assert_eq!(src.tree().get(&broker).unwrap().value, 1010);
    }

    #[test]
    fn apply_block_rejects_height_gap() {
        let mut e = engine(0, &[(addr(1), 10), (addr(2), 0)], &[], 10);
        e.submit_tx(plain(1, addr(1), addr(2), 3, 0)).unwrap();
        let out = e.produce_block(SimTime::from_secs(8.0));
        let mut replay = engine(0, &[(addr(1), 10), (addr(2), 0)], &[], 10).tree().clone();
        ShardEngine::apply_block(&mut replay, 1, &out.block).unwrap();
        assert_eq!(compute_state_root(&replay), out.block.header.state_root);
        assert_eq!(
            ShardEngine::apply_block(&mut replay, 2, &out.block),
            Err(ShardError::HeightGap { expected: 2, got: 1 })
        );
    }

    #[test]
    fn reconfiguration_moves_accounts_and_pool() {
        let (a, b) = (addr(1), addr(2));
        let mut e0 = engine(0, &[(a, 7), (b, 0)], &[], 10);
        let mut e1 = engine(1, &[], &[], 10);
        e0.submit_tx(plain(1, a, b, 1, 0)).unwrap();
        let trees = vec![e0.tree().clone(), e1.tree().clone()];
        let prev: BTreeMap<_, _> = [(a, ShardId(0)), (b, ShardId(0))].into();

        let unchanged = build_state_block(0, &prev, &BTreeSet::new(), None, vec![Digest::ZERO; 2], &prev, &trees);
        let root_before = e0.tree_mut().state_root();
        let mut e0_copy = e0.clone();
        assert!(e0_copy.reconfigure_state(&unchanged).unwrap().is_empty());
        assert_eq!(e0_copy.tree_mut().state_root(), root_before);

        let next: BTreeMap<_, _> = [(a, ShardId(1))].into();
        let sb = build_state_block(0, &next, &BTreeSet::new(), None, vec![Digest::ZERO; 2], &prev, &trees);

        let mut tampered = sb.clone();
        tampered.body.migrations[0].carried.value = 8;
        assert_eq!(e1.clone().reconfigure_state(&tampered), Err(ShardError::InconsistentMigration));

        let moved = e0.reconfigure_state(&sb).unwrap();
        assert_eq!(moved.len(), 1);
        assert!(e1.reconfigure_state(&sb).unwrap().is_empty());
        assert!(!e0.tree().contains(&a));
        let acc = e1.tree().get(&a).unwrap();
        assert_eq!((acc.value, acc.nonce), (7, 0));
        assert_eq!(e0.tree().total_value() + e1.tree().total_value(), 7);
    }

    #[test]
    fn block_log_csv_header() {
        let mut e = engine(0, &[(addr(1), 5)], &[], 10);
        let entry = BlockLogEntry::from_output(&e.produce_block(SimTime::from_secs(8.0)));
        let mut out = Vec::new();
        write_block_log(&[entry], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("sim_time,shard,height,n_txs,pool_size,state_root_prefix\n8000.000,0,1,0,0,"));
    }
}
