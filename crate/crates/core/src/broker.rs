//! Broker-mediated cross-shard transactions: the lifecycle record, the
//! operations on shard state for both the success path (Θ1 lock, Θ2 payout,
//! lock release) and the failure path (Θ1 at the destination, failure proof,
//! refund), and broker selection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{Canonical, Digest};
use crate::ledger::{
    account_secret, sign, Address, BlockHeight, FailureProof, HalfKind, HalfTx, RawCrossTx, ShardId, SimTime,
    Tokens, Transaction, TxBlock,
};
use crate::merkle::merkle_path;
use crate::msst::{AccountState, LockEntry, LockStatus, ShardStateTree, StateError};

/// Multiplier applied to the mean cross-shard latency when choosing `H_lock`.
pub const LOCK_LATENCY_FACTOR: f64 = 20.0;
pub const MIN_LOCK_DURATION: BlockHeight = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BrokerError {
    #[error("insufficient balance: have {have}, need {need}")]
    InsufficientBalance { have: Tokens, need: Tokens },
    #[error("broker holds {have} at the destination, needs {need}")]
    InsufficientBrokerBalance { have: Tokens, need: Tokens },
    #[error("lock duration must be at least {MIN_LOCK_DURATION} blocks, got {0}")]
    BadLockDuration(BlockHeight),
    #[error("payer signature does not verify")]
    BadPayerSignature,
    #[error("broker signature does not verify")]
    BadBrokerSignature,
    #[error("half transaction has the wrong shape")]
    Malformed,
    #[error("nonce mismatch: transaction carries {expected}, account is at {actual}")]
    NonceMismatch { expected: u64, actual: u64 },
    #[error("nonce {expected} not reached yet, account is at {actual}")]
    NonceNotReached { expected: u64, actual: u64 },
    #[error("source height {known} has reached the deadline {deadline}")]
    DeadlineExceeded { known: BlockHeight, deadline: BlockHeight },
    #[error("the cross-shard transaction is already resolved at this shard")]
    AlreadyResolved,
    #[error("Θ1 is not included in the given block")]
    NotIncluded,
    #[error("failure proof does not verify against the destination root")]
    BadProof,
    #[error("lock expired at height {lock_end}, current height {height}")]
    LockExpired { lock_end: BlockHeight, height: BlockHeight },
    #[error("lock ends at {lock_end}; release needs a height above it, got {height}")]
    PrematureRelease { lock_end: BlockHeight, height: BlockHeight },
    #[error("refusing release: the cross-shard transaction has not succeeded")]
    NotSucceeded,
    #[error("no broker has {0} tokens available at the destination")]
    NoEligibleBroker(Tokens),
    #[error("illegal phase transition {from:?} -> {to:?}")]
    IllegalTransition { from: CtxPhase, to: CtxPhase },
    #[error(transparent)]
    State(#[from] StateError),
}

/// Lifecycle phase of one cross-shard transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CtxPhase {
    Created,
    Theta1Pending,
    Theta1Confirmed,
    Theta2Pending,
    Succeeded,
    FailureDetected,
    Theta1AtDestConfirmed,
    ProofSent,
    Refunded,
}

impl CtxPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, CtxPhase::Succeeded | CtxPhase::Refunded)
    }

    /// Success chain, failure chain, and (for trusted brokers only) Θ2
    /// dispatched before Θ1 confirms. No back-edges.
    pub fn allows(self, to: CtxPhase, trusted: bool) -> bool {
        use CtxPhase::*;
        matches!(
            (self, to),
            (Created, Theta1Pending)
                | (Theta1Pending, Theta1Confirmed)
                | (Theta1Confirmed, Theta2Pending)
                | (Theta2Pending, Succeeded)
                | (Theta1Pending | Theta1Confirmed | Theta2Pending, FailureDetected)
                | (FailureDetected, Theta1AtDestConfirmed)
                | (Theta1AtDestConfirmed, ProofSent)
                | (ProofSent, Refunded)
        ) || (trusted && self == Theta1Pending && to == Theta2Pending)
    }

    pub fn name(self) -> &'static str {
        use CtxPhase::*;
        match self {
            Created => "created",
            Theta1Pending => "theta1_pending",
            Theta1Confirmed => "theta1_confirmed",
            Theta2Pending => "theta2_pending",
            Succeeded => "succeeded",
            FailureDetected => "failure_detected",
            Theta1AtDestConfirmed => "theta1_at_dest_confirmed",
            ProofSent => "proof_sent",
            Refunded => "refunded",
        }
    }
}

/// Θ2 deadline in source-shard heights: `H_current + ⌊H_lock/2⌋`.
pub fn theta2_deadline(h_current: BlockHeight, h_lock: BlockHeight) -> BlockHeight {
    h_current + h_lock / 2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub sim_time: SimTime,
    pub ctx_id: Digest,
    pub from: CtxPhase,
    pub to: CtxPhase,
    pub shard: ShardId,
    pub height: BlockHeight,
}

/// Append-only record of every phase transition.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    pub entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sim_time", "ctx_id", "phase_from", "phase_to", "shard", "height"])?;
        for e in &self.entries {
            w.write_record([
                format!("{:.3}", e.sim_time.as_ms()),
                e.ctx_id.to_hex(),
                e.from.name().to_string(),
                e.to.name().to_string(),
                e.shard.0.to_string(),
                e.height.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTxRecord {
    pub ctx_id: Digest,
    /// Workload transaction this CTX carries.
    pub tx_id: u64,
    pub raw: RawCrossTx,
    pub source: ShardId,
    pub dest: ShardId,
    pub h_current: BlockHeight,
    pub h_source: Option<BlockHeight>,
    pub deadline: BlockHeight,
    pub phase: CtxPhase,
    pub trusted: bool,
    pub created_at: SimTime,
    pub resolved_at: Option<SimTime>,
    /// Amount returned to the payer on the failure path (0 when no lock was
    /// ever created).
    pub refunded: Option<Tokens>,
    pub theta2_confirmed: bool,
    pub theta1_at_dest: Option<BlockHeight>,
}

impl CrossTxRecord {
    pub fn new(tx_id: u64, raw: RawCrossTx, source: ShardId, dest: ShardId, h_current: BlockHeight, now: SimTime) -> Self {
        CrossTxRecord {
            ctx_id: raw.ctx_id(),
            tx_id,
            deadline: theta2_deadline(h_current, raw.lock_duration),
            raw,
            source,
            dest,
            h_current,
            h_source: None,
            phase: CtxPhase::Created,
            trusted: false,
            created_at: now,
            resolved_at: None,
            refunded: None,
            theta2_confirmed: false,
            theta1_at_dest: None,
        }
    }

    pub fn lock_end(&self) -> Option<BlockHeight> {
        self.h_source.map(|h| h + self.raw.lock_duration)
    }

    /// Source height by which the record must be terminal.
    pub fn resolution_bound(&self) -> BlockHeight {
        self.h_source.unwrap_or(self.h_current) + self.raw.lock_duration + 1
    }

    pub fn transition(
        &mut self,
        to: CtxPhase,
        now: SimTime,
        shard: ShardId,
        height: BlockHeight,
        log: &mut AuditLog,
    ) -> Result<(), BrokerError> {
        if !self.phase.allows(to, self.trusted) {
            return Err(BrokerError::IllegalTransition { from: self.phase, to });
        }
        log.entries.push(AuditEntry {
            sim_time: now,
            ctx_id: self.ctx_id,
            from: self.phase,
            to,
            shard,
            height,
        });
        self.phase = to;
        if to.is_terminal() {
            self.resolved_at = Some(now);
        }
        Ok(())
    }
}

/// Brokers and their unreserved per-shard balances.
#[derive(Debug, Clone, Default)]
pub struct BrokerDirectory {
    available: BTreeMap<Address, Vec<Tokens>>,
}

impl BrokerDirectory {
    pub fn new(segmentation: BTreeMap<Address, Vec<Tokens>>) -> Self {
        BrokerDirectory { available: segmentation }
    }

    pub fn brokers(&self) -> BTreeSet<Address> {
        self.available.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }

    pub fn available(&self, broker: &Address, shard: ShardId) -> Tokens {
        self.available.get(broker).map_or(0, |v| v[shard.index()])
    }

    pub fn reserve(&mut self, broker: &Address, shard: ShardId, value: Tokens) -> Result<(), BrokerError> {
        let slot = self
            .available
            .get_mut(broker)
            .map(|v| &mut v[shard.index()])
            .ok_or(BrokerError::NoEligibleBroker(value))?;
        if *slot < value {
            return Err(BrokerError::InsufficientBrokerBalance { have: *slot, need: value });
        }
        *slot -= value;
        Ok(())
    }

    /// Returns tokens to the available pool (failed CTX, or release at the
    /// source).
    pub fn restore(&mut self, broker: &Address, shard: ShardId, value: Tokens) {
        if let Some(v) = self.available.get_mut(broker) {
            v[shard.index()] += value;
        }
    }
}

/// Broker with the largest available destination balance covering `value`;
/// ties go to the lowest address.
pub fn select_broker(
    directory: &BrokerDirectory,
    _source: ShardId,
    dest: ShardId,
    value: Tokens,
) -> Result<Address, BrokerError> {
    directory
        .available
        .iter()
        .map(|(b, v)| (v[dest.index()], b))
        .filter(|(avail, _)| *avail >= value)
        .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(x.1)))
        .map(|(_, b)| *b)
        .ok_or(BrokerError::NoEligibleBroker(value))
}

/// `⌈20 × latency / interval⌉`, at least 2.
pub fn recommend_lock_duration(avg_ctx_latency_s: f64, block_interval_s: f64) -> BlockHeight {
    assert!(avg_ctx_latency_s > 0.0 && block_interval_s > 0.0, "inputs must be positive");
    let blocks = (LOCK_LATENCY_FACTOR * avg_ctx_latency_s / block_interval_s).ceil() as BlockHeight;
    blocks.max(MIN_LOCK_DURATION)
}

/// Signs a raw CTX with explicit nonces.
#[allow(clippy::too_many_arguments)]
pub fn sign_raw_ctx(
    payer: Address,
    payee: Address,
    value: Tokens,
    broker: Address,
    lock_duration: BlockHeight,
    payer_nonce: u64,
    broker_nonce: u64,
) -> RawCrossTx {
    let bytes = RawCrossTx::signing_bytes(&payer, &payee, value, &broker, lock_duration, payer_nonce, broker_nonce);
    RawCrossTx {
        payer,
        payee,
        value,
        broker,
        lock_duration,
        payer_nonce,
        broker_nonce,
        payer_sig: sign(&bytes, &payer, &account_secret(&payer)),
    }
}

/// Op1: the payer builds Θ_raw from its live source state and the broker's
/// live destination state.
pub fn create_raw_ctx(
    payee: Address,
    value: Tokens,
    h_lock: BlockHeight,
    payer_state: &AccountState,
    broker_state: &AccountState,
) -> Result<RawCrossTx, BrokerError> {
    if h_lock < MIN_LOCK_DURATION {
        return Err(BrokerError::BadLockDuration(h_lock));
    }
    if payer_state.value < value {
        return Err(BrokerError::InsufficientBalance {
            have: payer_state.value,
            need: value,
        });
    }
    Ok(sign_raw_ctx(
        payer_state.address,
        payee,
        value,
        broker_state.address,
        h_lock,
        payer_state.nonce,
        broker_state.nonce,
    ))
}

fn broker_sign(kind: HalfKind, raw: RawCrossTx, current_height: Option<BlockHeight>) -> HalfTx {
    let sig = sign(
        &HalfTx::unsigned_bytes(kind, &raw, current_height),
        &raw.broker,
        &account_secret(&raw.broker),
    );
    HalfTx {
        kind,
        raw,
        current_height,
        broker_sig: sig,
    }
}

/// Op2: the broker stamps Θ1 with the source height it observed.
pub fn create_theta1(raw: RawCrossTx, source_height: BlockHeight) -> Result<HalfTx, BrokerError> {
    if !raw.verify_payer() {
        return Err(BrokerError::BadPayerSignature);
    }
    Ok(broker_sign(HalfKind::Type1, raw, Some(source_height)))
}

/// Op4.
pub fn create_theta2(raw: RawCrossTx) -> HalfTx {
    broker_sign(HalfKind::Type2, raw, None)
}

fn check_signatures(half: &HalfTx, kind: HalfKind) -> Result<(), BrokerError> {
    if half.kind != kind || !half.is_well_formed() {
        return Err(BrokerError::Malformed);
    }
    if !half.raw.verify_payer() {
        return Err(BrokerError::BadPayerSignature);
    }
    if !half.verify_broker() {
        return Err(BrokerError::BadBrokerSignature);
    }
    Ok(())
}

/// Pool admission check for Θ1 at its source shard: signatures, payer nonce
/// not yet consumed, payer deposit covering the value.
pub fn validate_theta1(source_tree: &ShardStateTree, theta1: &HalfTx) -> Result<(), BrokerError> {
    check_signatures(theta1, HalfKind::Type1)?;
    let raw = &theta1.raw;
    let payer = source_tree.get(&raw.payer).ok_or(StateError::NotInShard(raw.payer))?;
    if raw.payer_nonce < payer.nonce {
        return Err(BrokerError::NonceMismatch {
            expected: raw.payer_nonce,
            actual: payer.nonce,
        });
    }
    if payer.value < raw.value {
        return Err(BrokerError::InsufficientBalance {
            have: payer.value,
            need: raw.value,
        });
    }
    Ok(())
}

/// Pool admission check for Θ2 at the destination shard.
pub fn validate_theta2(dest_tree: &ShardStateTree, theta2: &HalfTx) -> Result<(), BrokerError> {
    check_signatures(theta2, HalfKind::Type2)?;
    let raw = &theta2.raw;
    let broker = dest_tree.get(&raw.broker).ok_or(StateError::NotInShard(raw.broker))?;
    if raw.broker_nonce < broker.nonce {
        return Err(BrokerError::NonceMismatch {
            expected: raw.broker_nonce,
            actual: broker.nonce,
        });
    }
    if broker.value < raw.value {
        return Err(BrokerError::InsufficientBrokerBalance {
            have: broker.value,
            need: raw.value,
        });
    }
    Ok(())
}

/// Op3: debit the payer and lock the value for `[h, h + H_lock]`.
pub fn confirm_theta1(tree: &mut ShardStateTree, theta1: &HalfTx, block_height: BlockHeight) -> Result<LockEntry, BrokerError> {
    let raw = &theta1.raw;
    let ctx_id = raw.ctx_id();
    if tree.is_cancelled(&ctx_id) {
        return Err(BrokerError::AlreadyResolved);
    }
    if tree.lock(&ctx_id).is_some() {
        return Err(StateError::DuplicateLock(ctx_id).into());
    }
    tree.debit(&raw.payer, raw.value, raw.payer_nonce)?;
    let entry = LockEntry {
        ctx_id,
        owner_broker: raw.broker,
        refund_to: raw.payer,
        amount: raw.value,
        lock_start: block_height,
        lock_end: block_height + raw.lock_duration,
        status: LockStatus::Locked,
    };
    tree.insert_lock(entry.clone())?;
    Ok(entry)
}

/// Whether the payee's credit landed here or has to follow the payee to the
/// shard it migrated to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Credit {
    Applied,
    Forward { to: Address, value: Tokens },
}

pub(crate) fn credit_or_forward(tree: &mut ShardStateTree, to: &Address, value: Tokens) -> Credit {
    if tree.contains(to) {
        tree.credit(to, value).expect("account present");
        Credit::Applied
    } else {
        Credit::Forward { to: *to, value }
    }
}

/// Op5: pay the payee from the broker's destination slice, provided the
/// latest known source height is still below the deadline.
pub fn confirm_theta2(
    dest_tree: &mut ShardStateTree,
    theta2: &HalfTx,
    latest_known_source_height: BlockHeight,
    deadline: BlockHeight,
) -> Result<Credit, BrokerError> {
    if latest_known_source_height >= deadline {
        return Err(BrokerError::DeadlineExceeded {
            known: latest_known_source_height,
            deadline,
        });
    }
    let raw = &theta2.raw;
    match dest_tree.debit(&raw.broker, raw.value, raw.broker_nonce) {
        Ok(()) => {}
        Err(StateError::InsufficientBalance { have, need }) => {
            return Err(BrokerError::InsufficientBrokerBalance { have, need })
        }
        Err(e) => return Err(e.into()),
    }
    Ok(credit_or_forward(dest_tree, &raw.payee, raw.value))
}

/// Effect of including Θ1 at the destination on the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonceOutcome {
    /// η_broker was consumed by this inclusion.
    Consumed,
    /// η_broker was already spent by another transaction, so Θ2 can no
    /// longer confirm either way.
    AlreadySpent,
}

/// Op3̄: include Θ1 at the destination, consuming η_broker so that Θ2 can
/// never confirm afterwards.
pub fn include_theta1_at_dest(
    dest_tree: &mut ShardStateTree,
    theta1: &HalfTx,
    theta2_confirmed: bool,
) -> Result<NonceOutcome, BrokerError> {
    if theta2_confirmed {
        return Err(BrokerError::AlreadyResolved);
    }
    let raw = &theta1.raw;
    let actual = dest_tree
        .get(&raw.broker)
        .ok_or(StateError::NotInShard(raw.broker))?
        .nonce;
    match raw.broker_nonce.cmp(&actual) {
        std::cmp::Ordering::Equal => {
            dest_tree.consume_nonce(&raw.broker, raw.broker_nonce)?;
            Ok(NonceOutcome::Consumed)
        }
        std::cmp::Ordering::Less => Ok(NonceOutcome::AlreadySpent),
        std::cmp::Ordering::Greater => Err(BrokerError::NonceNotReached {
            expected: raw.broker_nonce,
            actual,
        }),
    }
}

/// Op4̄: Merkle proof that Θ1 sits in `dest_block`.
pub fn build_failure_proof(dest_block: &TxBlock, theta1: &HalfTx) -> Result<FailureProof, BrokerError> {
    let leaf = Transaction::theta1_at_dest(theta1.clone()).digest();
    let digests = dest_block.tx_digests();
    let index = digests.iter().position(|d| *d == leaf).ok_or(BrokerError::NotIncluded)?;
    let path = merkle_path(&digests, index).map_err(|_| BrokerError::NotIncluded)?;
    Ok(FailureProof {
        theta1: theta1.clone(),
        dest: dest_block.header.shard,
        dest_height: dest_block.header.height,
        merkle_path: path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefundOutcome {
    /// The lock was returned to the payer.
    Refunded { amount: Tokens, credit: Credit },
    /// No lock existed; a tombstone now rejects any late Θ1.
    Cancelled,
}

/// Op5̄: verify γ against the destination block's transaction root and
/// refund the lock, or cancel the CTX if Θ1 never locked anything here.
pub fn confirm_failure_proof(
    source_tree: &mut ShardStateTree,
    gamma: &FailureProof,
    dest_tx_root: &Digest,
    current_source_height: BlockHeight,
) -> Result<RefundOutcome, BrokerError> {
    if !gamma.verify_against(dest_tx_root) || !gamma.theta1.verify_broker() {
        return Err(BrokerError::BadProof);
    }
    let ctx_id = gamma.theta1.raw.ctx_id();
    let Some(lock) = source_tree.lock(&ctx_id) else {
        if source_tree.is_cancelled(&ctx_id) {
            return Err(BrokerError::AlreadyResolved);
        }
        source_tree.cancel(ctx_id);
        return Ok(RefundOutcome::Cancelled);
    };
    if lock.status != LockStatus::Locked {
        return Err(BrokerError::AlreadyResolved);
    }
    if current_source_height >= lock.lock_end {
        return Err(BrokerError::LockExpired {
            lock_end: lock.lock_end,
            height: current_source_height,
        });
    }
    let refund_to = lock.refund_to;
    let amount = source_tree.settle_lock(&ctx_id, LockStatus::RefundedToPayer)?;
    let credit = credit_or_forward(source_tree, &refund_to, amount);
    Ok(RefundOutcome::Refunded { amount, credit })
}

/// Hands the locked value to the broker's source slice once the lock window
/// has passed and the CTX is known to have succeeded.
pub fn release_lock(
    source_tree: &mut ShardStateTree,
    ctx_id: &Digest,
    current_source_height: BlockHeight,
    phase: CtxPhase,
) -> Result<Tokens, BrokerError> {
    let lock = source_tree.lock(ctx_id).ok_or(StateError::NoLock(*ctx_id))?;
    if lock.status != LockStatus::Locked {
        return Err(StateError::LockSettled(*ctx_id).into());
    }
    if current_source_height <= lock.lock_end {
        return Err(BrokerError::PrematureRelease {
            lock_end: lock.lock_end,
            height: current_source_height,
        });
    }
    if phase != CtxPhase::Succeeded {
        return Err(BrokerError::NotSucceeded);
    }
    let broker = lock.owner_broker;
    let amount = source_tree.settle_lock(ctx_id, LockStatus::ReleasedToBroker)?;
    source_tree.credit(&broker, amount)?;
    Ok(amount)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{tx_root, BlockHeader};
    use crate::msst::StorageMap;

    const N: usize = 2;
    const SRC: ShardId = ShardId(0);
    const DST: ShardId = ShardId(1);

    fn addr(b: u8) -> Address {
        Address([b; 20])
    }

    struct Fixture {
        src: ShardStateTree,
        dst: ShardStateTree,
        payer: Address,
        payee: Address,
        broker: Address,
    }

    fn fixture(payer_balance: Tokens, broker_slice: Tokens) -> Fixture {
        let (payer, payee, broker) = (addr(0xa), addr(0xb), addr(0xc));
        let mut src = ShardStateTree::new(SRC);
        let mut dst = ShardStateTree::new(DST);
        src.insert(AccountState::new(payer, StorageMap::single(N, SRC), payer_balance)).unwrap();
        dst.insert(AccountState::new(payee, StorageMap::single(N, DST), 0)).unwrap();
        src.insert(AccountState::new(broker, StorageMap::all(N), broker_slice)).unwrap();
        dst.insert(AccountState::new(broker, StorageMap::all(N), broker_slice)).unwrap();
        Fixture {
            src,
            dst,
            payer,
            payee,
            broker,
        }
    }

    impl Fixture {
        fn raw(&self, value: Tokens, h_lock: BlockHeight) -> RawCrossTx {
            create_raw_ctx(self.payee, value, h_lock, self.src.get(&self.payer).unwrap(), self.dst.get(&self.broker).unwrap())
                .unwrap()
        }

        fn total(&self) -> Tokens {
            self.src.total_value() + self.src.locked_value() + self.dst.total_value() + self.dst.locked_value()
        }
    }

    fn block_with(shard: ShardId, height: BlockHeight, txs: Vec<Transaction>) -> TxBlock {
        let digests: Vec<Digest> = txs.iter().map(Canonical::digest).collect();
        TxBlock {
            header: BlockHeader {
                shard,
                height,
                prev_hash: Digest::ZERO,
                tx_root: tx_root(&digests),
                state_root: Digest::ZERO,
                produced_at: SimTime::ZERO,
            },
            txs,
        }
    }

    #[test]
    fn raw_ctx_creation() {
        let f = fixture(10, 100);
        let raw = f.raw(10, 40);
        assert!(raw.verify_payer());
        assert_eq!((raw.payer_nonce, raw.broker_nonce), (0, 0));
        let payer = f.src.get(&f.payer).unwrap();
        let broker = f.dst.get(&f.broker).unwrap();
        assert_eq!(
            create_raw_ctx(f.payee, 11, 40, payer, broker),
            Err(BrokerError::InsufficientBalance { have: 10, need: 11 })
        );
        assert_eq!(create_raw_ctx(f.payee, 1, 1, payer, broker), Err(BrokerError::BadLockDuration(1)));
    }

    #[test]
    fn theta1_deadline_arithmetic() {
        let f = fixture(10, 100);
        let t1 = create_theta1(f.raw(10, 40), 100).unwrap();
        assert_eq!(t1.current_height, Some(100));
        assert_eq!(theta2_deadline(100, 40), 120);
        assert_eq!(theta2_deadline(100, 5), 102);

        let mut forged = f.raw(10, 40);
        forged.value = 9;
        assert_eq!(create_theta1(forged, 100), Err(BrokerError::BadPayerSignature));
    }

    #[test]
    fn success_path_end_to_end() {
        let mut f = fixture(10, 100);
        let before = f.total();
        let raw = f.raw(10, 40);
        let t1 = create_theta1(raw.clone(), 100).unwrap();
        validate_theta1(&f.src, &t1).unwrap();

        let lock = confirm_theta1(&mut f.src, &t1, 101).unwrap();
        assert_eq!((lock.amount, lock.lock_start, lock.lock_end), (10, 101, 141));
        assert_eq!(f.src.get(&f.payer).unwrap().value, 0);
        assert_eq!(f.total(), before);
        assert!(matches!(
            confirm_theta1(&mut f.src, &t1, 102),
            Err(BrokerError::State(StateError::DuplicateLock(_)))
        ));

        let t2 = create_theta2(raw.clone());
        validate_theta2(&f.dst, &t2).unwrap();
        assert_eq!(
            confirm_theta2(&mut f.dst, &t2, 120, 120),
            Err(BrokerError::DeadlineExceeded { known: 120, deadline: 120 })
        );
        assert_eq!(confirm_theta2(&mut f.dst, &t2, 119, 120), Ok(Credit::Applied));
        assert_eq!(f.dst.get(&f.payee).unwrap().value, 10);
        assert_eq!(f.total(), before);

        let id = raw.ctx_id();
        assert_eq!(
            release_lock(&mut f.src, &id, 141, CtxPhase::Succeeded),
            Err(BrokerError::PrematureRelease { lock_end: 141, height: 141 })
        );
        assert_eq!(release_lock(&mut f.src, &id, 142, CtxPhase::Theta2Pending), Err(BrokerError::NotSucceeded));
        assert_eq!(release_lock(&mut f.src, &id, 142, CtxPhase::Succeeded), Ok(10));
        let broker_total = f.src.get(&f.broker).unwrap().value + f.dst.get(&f.broker).unwrap().value;
        assert_eq!(broker_total, 200);
        assert_eq!(f.total(), before);
    }

    #[test]
    fn replayed_theta1_is_rejected() {
        let mut f = fixture(20, 100);
        let raw = f.raw(10, 40);
        let t1 = create_theta1(raw, 100).unwrap();
        confirm_theta1(&mut f.src, &t1, 101).unwrap();
        assert!(matches!(validate_theta1(&f.src, &t1), Err(BrokerError::NonceMismatch { expected: 0, actual: 1 })));
    }

    #[test]
    fn theta2_nonce_and_balance_checks() {
        let mut f = fixture(10, 5);
        let raw = f.raw(10, 40);
        let t2 = create_theta2(raw.clone());
        assert_eq!(
            validate_theta2(&f.dst, &t2),
            Err(BrokerError::InsufficientBrokerBalance { have: 5, need: 10 })
        );
        // Broker self-deals a competing transaction with the same nonce.
        f.dst.apply_transfer(&f.broker, &f.payee, 1, 0).unwrap();
        assert!(matches!(validate_theta2(&f.dst, &t2), Err(BrokerError::NonceMismatch { .. })));
    }

    #[test]
    fn failure_path_refund_restores_everyone() {
        let mut f = fixture(10, 100);
        let before = f.total();
        let raw = f.raw(10, 40);
        let t1 = create_theta1(raw.clone(), 100).unwrap();
        confirm_theta1(&mut f.src, &t1, 101).unwrap();

        assert_eq!(include_theta1_at_dest(&mut f.dst, &t1, true), Err(BrokerError::AlreadyResolved));
        assert_eq!(include_theta1_at_dest(&mut f.dst, &t1, false), Ok(NonceOutcome::Consumed));
        // Θ2 can never confirm afterwards.
        let t2 = create_theta2(raw.clone());
        assert!(matches!(
            confirm_theta2(&mut f.dst, &t2, 110, 120),
            Err(BrokerError::State(StateError::NonceMismatch { .. }))
        ));

        let filler: Vec<Transaction> = (0..7)
            .map(|i| Transaction::plain(i, addr(1), addr(2), 1, i, SimTime::ZERO))
            .collect();
        let mut txs = filler[..3].to_vec();
        txs.push(Transaction::theta1_at_dest(t1.clone()));
        txs.extend_from_slice(&filler[3..]);
        let block = block_with(DST, 121, txs);
        let gamma = build_failure_proof(&block, &t1).unwrap();
        assert_eq!(gamma.merkle_path.len(), 3);

        let mut tampered = gamma.clone();
        tampered.merkle_path[0].sibling = Digest::hash(b"x");
        assert_eq!(
            confirm_failure_proof(&mut f.src, &tampered, &block.header.tx_root, 140),
            Err(BrokerError::BadProof)
        );
        assert_eq!(
            confirm_failure_proof(&mut f.src, &gamma, &block.header.tx_root, 141),
            Err(BrokerError::LockExpired { lock_end: 141, height: 141 })
        );
        assert_eq!(
            confirm_failure_proof(&mut f.src, &gamma, &block.header.tx_root, 140),
            Ok(RefundOutcome::Refunded {
                amount: 10,
                credit: Credit::Applied
            })
        );
        assert_eq!(f.src.get(&f.payer).unwrap().value, 10);
        assert_eq!(f.dst.get(&f.payee).unwrap().value, 0);
        assert_eq!(f.src.get(&f.broker).unwrap().value + f.dst.get(&f.broker).unwrap().value, 200);
        assert_eq!(f.total(), before);
        assert_eq!(
            confirm_failure_proof(&mut f.src, &gamma, &block.header.tx_root, 130),
            Err(BrokerError::AlreadyResolved)
        );
    }

    #[test]
    fn proof_without_lock_cancels_late_theta1() {
        let mut f = fixture(10, 100);
        let t1 = create_theta1(f.raw(10, 40), 100).unwrap();
        include_theta1_at_dest(&mut f.dst, &t1, false).unwrap();
        let block = block_with(DST, 121, vec![Transaction::theta1_at_dest(t1.clone())]);
        let gamma = build_failure_proof(&block, &t1).unwrap();
        assert!(gamma.merkle_path.is_empty());
        assert_eq!(
            confirm_failure_proof(&mut f.src, &gamma, &block.header.tx_root, 125),
            Ok(RefundOutcome::Cancelled)
        );
        assert_eq!(confirm_theta1(&mut f.src, &t1, 126), Err(BrokerError::AlreadyResolved));
        assert_eq!(f.src.get(&f.payer).unwrap().value, 10);
    }

    #[test]
    fn theta1_at_dest_nonce_cases() {
        let mut f = fixture(10, 100);
        let t1 = create_theta1(f.raw(5, 40), 100).unwrap();
        // Broker spent η_broker on something else: include without consuming.
        f.dst.consume_nonce(&f.broker, 0).unwrap();
        assert_eq!(include_theta1_at_dest(&mut f.dst, &t1, false), Ok(NonceOutcome::AlreadySpent));

        let raw = sign_raw_ctx(f.payer, f.payee, 5, f.broker, 40, 0, 3);
        let t1 = create_theta1(raw, 100).unwrap();
        assert_eq!(
            include_theta1_at_dest(&mut f.dst, &t1, false),
            Err(BrokerError::NonceNotReached { expected: 3, actual: 1 })
        );
    }

    #[test]
    fn proof_requires_inclusion() {
        let f = fixture(10, 100);
        let t1 = create_theta1(f.raw(5, 40), 100).unwrap();
        let block = block_with(DST, 1, vec![Transaction::plain(1, f.payer, f.payee, 1, 0, SimTime::ZERO)]);
        assert_eq!(build_failure_proof(&block, &t1), Err(BrokerError::NotIncluded));
    }

    #[test]
    fn broker_selection() {
        let dir = BrokerDirectory::new([(addr(1), vec![0, 100]), (addr(2), vec![0, 50])].into());
        assert_eq!(select_broker(&dir, SRC, DST, 60), Ok(addr(1)));
        let dir = BrokerDirectory::new([(addr(2), vec![0, 70]), (addr(1), vec![0, 70])].into());
        assert_eq!(select_broker(&dir, SRC, DST, 60), Ok(addr(1)));
        assert_eq!(select_broker(&dir, SRC, DST, 71), Err(BrokerError::NoEligibleBroker(71)));
        assert_eq!(select_broker(&BrokerDirectory::default(), SRC, DST, 1), Err(BrokerError::NoEligibleBroker(1)));
    }

    #[test]
    fn reservation_accounting() {
        let mut dir = BrokerDirectory::new([(addr(1), vec![10, 10])].into());
        dir.reserve(&addr(1), DST, 7).unwrap();
        assert_eq!(dir.available(&addr(1), DST), 3);
        assert!(dir.reserve(&addr(1), DST, 4).is_err());
        dir.restore(&addr(1), DST, 7);
        assert_eq!(dir.available(&addr(1), DST), 10);
    }

    #[test]
    fn lock_duration_recommendation() {
        assert_eq!(recommend_lock_duration(16.0, 8.0), 40);
        assert_eq!(recommend_lock_duration(0.1, 8.0), 2);
        assert_eq!(recommend_lock_duration(8.0, 4.0), 40);
    }

    #[test]
    fn phase_graph_has_no_back_edges() {
        use CtxPhase::*;
        let all = [
            Created,
            Theta1Pending,
            Theta1Confirmed,
            Theta2Pending,
            Succeeded,
            FailureDetected,
            Theta1AtDestConfirmed,
            ProofSent,
            Refunded,
        ];
        for from in all {
            for to in all {
                if from.allows(to, true) {
                    assert!(!to.allows(from, true), "{from:?} <-> {to:?}");
                }
            }
            if from.is_terminal() {
                assert!(all.iter().all(|t| !from.allows(*t, true)));
            }
        }
        assert!(!Theta1Pending.allows(Theta2Pending, false));
        assert!(Theta1Pending.allows(Theta2Pending, true));
    }

    #[test]
    fn transitions_are_audited() {
        let f = fixture(10, 100);
        let mut rec = CrossTxRecord::new(1, f.raw(5, 40), SRC, DST, 100, SimTime::ZERO);
        let mut log = AuditLog::default();
        rec.transition(CtxPhase::Theta1Pending, SimTime::from_ms(1.0), SRC, 100, &mut log).unwrap();
        assert_eq!(
            rec.transition(CtxPhase::Succeeded, SimTime::from_ms(2.0), DST, 101, &mut log),
            Err(BrokerError::IllegalTransition {
                from: CtxPhase::Theta1Pending,
                to: CtxPhase::Succeeded
            })
        );
        assert_eq!(log.entries.len(), 1);
        assert_eq!(rec.deadline, 120);
        assert!(rec.resolved_at.is_none());
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("sim_time,ctx_id,phase_from,phase_to,shard,height\n"));
        assert!(text.contains(",created,theta1_pending,0,100"));
    }
}
