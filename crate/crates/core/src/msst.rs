//! Per-shard account storage (the modified shard state tree): account states
//! keyed by address, the global storage map Ψ of every account, token locks
//! for in-flight cross-shard transactions, and Merkle state roots.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{empty_root, Canonical, Digest, Encoder};
use crate::ledger::{Address, BlockHeight, PlacementLookup, ShardId, Tokens, UnknownAccount};
use crate::merkle::{merkle_root, IncrementalMerkle};

/// Ψ: one bit per M-shard, set where the account holds a state slice.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StorageMap {
    len: usize,
    words: Vec<u64>,
}

impl StorageMap {
    pub fn empty(num_shards: usize) -> Self {
        StorageMap {
            len: num_shards,
            words: vec![0; num_shards.div_ceil(64)],
        }
    }

    pub fn single(num_shards: usize, shard: ShardId) -> Self {
        let mut m = Self::empty(num_shards);
        m.set(shard, true);
        m
    }

    pub fn all(num_shards: usize) -> Self {
        let mut m = Self::empty(num_shards);
        for i in 0..num_shards {
            m.set(ShardId(i as u32), true);
        }
        m
    }

    /// Same bits, different length (new bits clear, extra bits dropped).
    pub fn resized(&self, num_shards: usize) -> Self {
        let mut m = Self::empty(num_shards);
        for s in self.shards().filter(|s| s.index() < num_shards) {
            m.set(s, true);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, shard: ShardId) -> bool {
        let i = shard.index();
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, shard: ShardId, on: bool) {
        let i = shard.index();
        assert!(i < self.len, "shard {i} outside storage map of length {}", self.len);
        if on {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn lowest(&self) -> Option<ShardId> {
        first_bit(&self.words)
    }

    pub fn lowest_shared(&self, other: &StorageMap) -> Option<ShardId> {
        let and: Vec<u64> = self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect();
        first_bit(&and)
    }

    pub fn shards(&self) -> impl Iterator<Item = ShardId> + '_ {
        (0..self.len).map(|i| ShardId(i as u32)).filter(|s| self.get(*s))
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(ShardId(i as u32))).collect()
    }
}

fn first_bit(words: &[u64]) -> Option<ShardId> {
    words
        .iter()
        .enumerate()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| ShardId((i * 64 + w.trailing_zeros() as usize) as u32))
}

/// ζ: account type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Code {
    User,
    Contract(Digest),
}

/// 𝕊_μ = {X_μ | Ψ, η, ω, ζ}, as stored in one shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountState {
    pub address: Address,
    pub storage_map: StorageMap,
    pub nonce: u64,
    pub value: Tokens,
    pub code: Code,
}

impl AccountState {
    pub fn new(address: Address, storage_map: StorageMap, value: Tokens) -> Self {
        AccountState {
            address,
            storage_map,
            nonce: 0,
            value,
            code: Code::User,
        }
    }
}

impl Canonical for AccountState {
    fn encode(&self, enc: &mut Encoder) {
        let bits: Vec<u8> = self.storage_map.bits().into_iter().map(u8::from).collect();
        enc.bytes(&self.address.0).bytes(&bits).u64(self.nonce).u128(self.value);
        match self.code {
            Code::User => enc.u8(0),
            Code::Contract(d) => enc.u8(1).digest(&d),
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockStatus {
    Locked,
    ReleasedToBroker,
    RefundedToPayer,
}

/// Payer tokens held at the source shard for `[lock_start, lock_end]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockEntry {
    pub ctx_id: Digest,
    pub owner_broker: Address,
    pub refund_to: Address,
    pub amount: Tokens,
    pub lock_start: BlockHeight,
    pub lock_end: BlockHeight,
    pub status: LockStatus,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("account {0} is not stored in this shard")]
    NotInShard(Address),
    #[error("insufficient balance: have {have}, need {need}")]
    InsufficientBalance { have: Tokens, need: Tokens },
    #[error("nonce mismatch: expected {expected}, account is at {actual}")]
    NonceMismatch { expected: u64, actual: u64 },
    #[error("lock for {0:?} already exists")]
    DuplicateLock(Digest),
    #[error("no lock for {0:?}")]
    NoLock(Digest),
    #[error("lock for {0:?} already settled")]
    LockSettled(Digest),
    #[error("account {0} is already stored in this shard")]
    AlreadyPresent(Address),
    #[error("storage map of {0} does not include this shard")]
    WrongShard(Address),
}

/// One shard's account store.
#[derive(Debug, Clone)]
pub struct ShardStateTree {
    shard: ShardId,
    accounts: BTreeMap<Address, AccountState>,
    locks: BTreeMap<Digest, LockEntry>,
    /// Cross-shard transactions refunded before their Θ1 reached this shard.
    cancelled: BTreeSet<Digest>,
    root_cache: RootCache,
}

#[derive(Debug, Clone, Default)]
struct RootCache {
    tree: IncrementalMerkle,
    index: HashMap<Address, usize>,
    dirty: HashSet<Address>,
    stale_layout: bool,
}

impl ShardStateTree {
    pub fn new(shard: ShardId) -> Self {
        ShardStateTree {
            shard,
            accounts: BTreeMap::new(),
            locks: BTreeMap::new(),
            cancelled: BTreeSet::new(),
            root_cache: RootCache {
                stale_layout: true,
                ..RootCache::default()
            },
        }
    }

    pub fn shard(&self) -> ShardId {
        self.shard
    }

    pub fn get(&self, addr: &Address) -> Option<&AccountState> {
        self.accounts.get(addr)
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.accounts.contains_key(addr)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &AccountState> {
        self.accounts.values()
    }

    pub fn len(&self) -> usize {
        self.accounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accounts.is_empty()
    }

    pub fn insert(&mut self, state: AccountState) -> Result<(), StateError> {
        if !state.storage_map.get(self.shard) {
            return Err(StateError::WrongShard(state.address));
        }
        if self.accounts.contains_key(&state.address) {
            return Err(StateError::AlreadyPresent(state.address));
        }
        self.accounts.insert(state.address, state);
        self.root_cache.stale_layout = true;
        Ok(())
    }

    pub fn remove(&mut self, addr: &Address) -> Result<AccountState, StateError> {
        let state = self.accounts.remove(addr).ok_or(StateError::NotInShard(*addr))?;
        self.root_cache.stale_layout = true;
        Ok(state)
    }

    fn account_mut(&mut self, addr: &Address) -> Result<&mut AccountState, StateError> {
        let state = self.accounts.get_mut(addr).ok_or(StateError::NotInShard(*addr))?;
        self.root_cache.dirty.insert(*addr);
        Ok(state)
    }

    pub fn set_storage_map(&mut self, addr: &Address, map: StorageMap) -> Result<(), StateError> {
        self.account_mut(addr)?.storage_map = map;
        Ok(())
    }

    /// Debits `value` from `from` after checking its shard-local nonce, then
    /// bumps the nonce. Fails without side effects.
    pub fn debit(&mut self, from: &Address, value: Tokens, expected_nonce: u64) -> Result<(), StateError> {
        let acc = self.accounts.get(from).ok_or(StateError::NotInShard(*from))?;
        if acc.nonce != expected_nonce {
            return Err(StateError::NonceMismatch {
                expected: expected_nonce,
                actual: acc.nonce,
            });
        }
        if acc.value < value {
            return Err(StateError::InsufficientBalance {
                have: acc.value,
                need: value,
            });
        }
        let acc = self.account_mut(from)?;
        acc.value -= value;
        acc.nonce += 1;
        Ok(())
    }

    pub fn credit(&mut self, to: &Address, value: Tokens) -> Result<(), StateError> {
        self.account_mut(to)?.value += value;
        Ok(())
    }

    /// Consumes nonce `expected` without moving tokens.
    pub fn consume_nonce(&mut self, addr: &Address, expected: u64) -> Result<(), StateError> {
        self.debit(addr, 0, expected)
    }

    /// Plain transfer within this shard.
    pub fn apply_transfer(
        &mut self,
        from: &Address,
        to: &Address,
        value: Tokens,
        expected_nonce: u64,
    ) -> Result<(), StateError> {
        if !self.accounts.contains_key(to) {
            return Err(StateError::NotInShard(*to));
        }
        self.debit(from, value, expected_nonce)?;
        self.credit(to, value)
    }

    pub fn lock(&self, ctx_id: &Digest) -> Option<&LockEntry> {
        self.locks.get(ctx_id)
    }

    pub fn locks(&self) -> impl Iterator<Item = &LockEntry> {
        self.locks.values()
    }

    pub fn insert_lock(&mut self, entry: LockEntry) -> Result<(), StateError> {
        if self.locks.contains_key(&entry.ctx_id) {
            return Err(StateError::DuplicateLock(entry.ctx_id));
        }
        self.locks.insert(entry.ctx_id, entry);
        Ok(())
    }

    /// Moves a `Locked` entry to its terminal status, returning the amount.
    pub fn settle_lock(&mut self, ctx_id: &Digest, status: LockStatus) -> Result<Tokens, StateError> {
        let entry = self.locks.get_mut(ctx_id).ok_or(StateError::NoLock(*ctx_id))?;
        if entry.status != LockStatus::Locked {
            return Err(StateError::LockSettled(*ctx_id));
        }
        entry.status = status;
        Ok(entry.amount)
    }

    pub fn cancel(&mut self, ctx_id: Digest) {
        self.cancelled.insert(ctx_id);
    }

    pub fn is_cancelled(&self, ctx_id: &Digest) -> bool {
        self.cancelled.contains(ctx_id)
    }

    /// Σω over stored accounts.
    pub fn total_value(&self) -> Tokens {
        self.accounts.values().map(|a| a.value).sum()
    }

    /// Σ of amounts still `Locked`.
    pub fn locked_value(&self) -> Tokens {
        self.locks
            .values()
            .filter(|l| l.status == LockStatus::Locked)
            .map(|l| l.amount)
            .sum()
    }

    /// Cached root, updating only accounts touched since the last call.
    pub fn state_root(&mut self) -> Digest {
        let cache = &mut self.root_cache;
        if cache.stale_layout {
            let leaves: Vec<Digest> = self.accounts.values().map(Canonical::digest).collect();
            cache.index = self.accounts.keys().enumerate().map(|(i, a)| (*a, i)).collect();
            cache.tree = IncrementalMerkle::build(leaves);
            cache.stale_layout = false;
            cache.dirty.clear();
        } else {
            let mut dirty: Vec<Address> = cache.dirty.drain().collect();
            dirty.sort();
            for addr in dirty {
                if let (Some(&i), Some(state)) = (cache.index.get(&addr), self.accounts.get(&addr)) {
                    cache.tree.update(i, state.digest());
                }
            }
        }
        cache.tree.root().unwrap_or_else(empty_root)
    }
}

/// Full recomputation of a tree's state root.
pub fn compute_state_root(tree: &ShardStateTree) -> Digest {
    let leaves: Vec<Digest> = tree.accounts().map(Canonical::digest).collect();
    merkle_root(&leaves).unwrap_or_else(|_| empty_root())
}

/// Global Ψ for every known account, plus the broker set.
#[derive(Debug, Clone)]
pub struct PlacementRegistry {
    num_shards: usize,
    maps: HashMap<Address, StorageMap>,
    brokers: BTreeSet<Address>,
}

impl PlacementRegistry {
    pub fn new(num_shards: usize) -> Self {
        PlacementRegistry {
            num_shards,
            maps: HashMap::new(),
            brokers: BTreeSet::new(),
        }
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    pub fn get_storage_map(&self, addr: &Address) -> Result<&StorageMap, UnknownAccount> {
        self.maps.get(addr).ok_or(UnknownAccount(*addr))
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.maps.contains_key(addr)
    }

    pub fn place(&mut self, addr: Address, shard: ShardId) {
        self.maps.insert(addr, StorageMap::single(self.num_shards, shard));
    }

    pub fn segment(&mut self, addr: Address) {
        self.maps.insert(addr, StorageMap::all(self.num_shards));
        self.brokers.insert(addr);
    }

    pub fn is_broker(&self, addr: &Address) -> bool {
        self.brokers.contains(addr)
    }

    pub fn brokers(&self) -> &BTreeSet<Address> {
        &self.brokers
    }

    /// Lowest shard holding the account.
    pub fn home(&self, addr: &Address) -> Result<ShardId, UnknownAccount> {
        self.get_storage_map(addr)?.lowest().ok_or(UnknownAccount(*addr))
    }

    pub fn addresses(&self) -> impl Iterator<Item = &Address> {
        self.maps.keys()
    }
}

impl PlacementLookup for PlacementRegistry {
    fn storage_map(&self, addr: &Address) -> Option<&StorageMap> {
        self.maps.get(addr)
    }
}

/// Sum of ω over every shard where the account holds a slice.
pub fn total_deposit(
    addr: &Address,
    registry: &PlacementRegistry,
    trees: &[ShardStateTree],
) -> Result<Tokens, UnknownAccount> {
    let map = registry.get_storage_map(addr)?;
    Ok(map
        .shards()
        .filter_map(|s| trees.get(s.index()).and_then(|t| t.get(addr)))
        .map(|a| a.value)
        .sum())
}
