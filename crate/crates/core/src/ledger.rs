//! Core ledger types shared by every other module: addresses, mock
//! signatures, transactions (plain, broker halves, relay legs, failure
//! proofs), blocks, and intra/cross-shard classification.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{empty_root, Canonical, Digest, Encoder};
use crate::merkle::{merkle_root, verify_path, MerklePath};
use crate::msst::StorageMap;

/// Indivisible token units.
pub type Tokens = u128;
pub type BlockHeight = u64;

/// Index of an M-shard in `0..S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardId(pub u32);

impl ShardId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_ms(ms: f64) -> Self {
        SimTime((ms * 1e6).round() as u64)
    }

    pub fn from_secs(s: f64) -> Self {
        SimTime((s * 1e9).round() as u64)
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AddressParseError {
    #[error("address has {0} hex digits, at most 40 allowed")]
    TooLong(usize),
    #[error("address is empty")]
    Empty,
    #[error("invalid hex character {0:?}")]
    BadChar(char),
}

/// 20-byte account address, ordered lexicographically.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Address(pub [u8; 20]);

impl Address {
    /// Deterministic pseudo-random address for synthetic accounts.
    pub fn derived(domain: &str, index: u64) -> Self {
        let d = Digest::hash(&Encoder::new().bytes(domain.as_bytes()).u64(index).finish());
        let mut out = [0u8; 20];
        out.copy_from_slice(&d.0[..20]);
        Address(out)
    }

    /// Parses up to 40 hex digits (optional `0x` prefix); shorter inputs are
    /// left-padded with zeros.
    pub fn from_hex(s: &str) -> Result<Self, AddressParseError> {
        let s = s.trim();
        let s = s
            .strip_prefix("0x")
            .or_else(|| s.strip_prefix("0X"))
            .unwrap_or(s);
        if s.is_empty() {
            return Err(AddressParseError::Empty);
        }
        if s.len() > 40 {
            return Err(AddressParseError::TooLong(s.chars().count()));
        }
        let mut nibbles = [0u8; 40];
        let offset = 40 - s.len();
        for (i, c) in s.chars().enumerate() {
            let v = c.to_digit(16).ok_or(AddressParseError::BadChar(c))? as u8;
            nibbles[offset + i] = v;
        }
        let mut out = [0u8; 20];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = (nibbles[2 * i] << 4) | nibbles[2 * i + 1];
        }
        Ok(Address(out))
    }

    pub fn to_hex(&self) -> String {
        format!("0x{}", crate::digest::hex_encode(&self.0))
    }

    /// Leading `bits` bits of the address as an integer (`bits` ≤ 64).
    pub fn prefix_bits(&self, bits: u32) -> u64 {
        if bits == 0 {
            return 0;
        }
        let mut head = [0u8; 8];
        head.copy_from_slice(&self.0[..8]);
        u64::from_be_bytes(head) >> (64 - bits.min(64))
    }
}

impl FromStr for Address {
    type Err = AddressParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Address::from_hex(s)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..10])
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Deterministic keyed digest standing in for an ECDSA signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature(pub Digest);

pub fn sign(payload: &[u8], signer: &Address, secret: &[u8]) -> Signature {
    let bytes = Encoder::new()
        .bytes(b"brokershard/sig")
        .bytes(payload)
        .bytes(&signer.0)
        .bytes(secret)
        .finish();
    Signature(Digest::hash(&bytes))
}

pub fn verify(payload: &[u8], sig: &Signature, signer: &Address, secret: &[u8]) -> bool {
    sign(payload, signer, secret) == *sig
}

/// Signing secret of an account. Real keys are out of scope; every party in
/// the simulation can recompute this, which is all the mock scheme needs.
pub fn account_secret(addr: &Address) -> Vec<u8> {
    Digest::hash(&Encoder::new().bytes(b"secret").bytes(&addr.0).finish())
        .0
        .to_vec()
}

/// The payer-signed raw cross-shard transaction ⟨B, v, C, H_lock, η_payer, η_broker⟩.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCrossTx {
    pub payer: Address,
    pub payee: Address,
    pub value: Tokens,
    pub broker: Address,
    pub lock_duration: BlockHeight,
    pub payer_nonce: u64,
    pub broker_nonce: u64,
    pub payer_sig: Signature,
}

impl RawCrossTx {
    pub fn signing_bytes(
        payer: &Address,
        payee: &Address,
        value: Tokens,
        broker: &Address,
        lock_duration: BlockHeight,
        payer_nonce: u64,
        broker_nonce: u64,
    ) -> Vec<u8> {
        Encoder::new()
            .bytes(&payer.0)
            .bytes(&payee.0)
            .u128(value)
            .bytes(&broker.0)
            .u64(lock_duration)
            .u64(payer_nonce)
            .u64(broker_nonce)
            .finish()
    }

    pub fn unsigned_bytes(&self) -> Vec<u8> {
        Self::signing_bytes(
            &self.payer,
            &self.payee,
            self.value,
            &self.broker,
            self.lock_duration,
            self.payer_nonce,
            self.broker_nonce,
        )
    }

    pub fn verify_payer(&self) -> bool {
        verify(
            &self.unsigned_bytes(),
            &self.payer_sig,
            &self.payer,
            &account_secret(&self.payer),
        )
    }

    /// Identity of the cross-shard transaction across its whole lifecycle.
    pub fn ctx_id(&self) -> Digest {
        self.digest()
    }
}

impl Canonical for RawCrossTx {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.unsigned_bytes()).digest(&self.payer_sig.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HalfKind {
    Type1,
    Type2,
}

/// Broker-signed half of a cross-shard transaction (Θ1 or Θ2).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HalfTx {
    pub kind: HalfKind,
    pub raw: RawCrossTx,
    /// Source-shard height when Θ1 was created; present iff `Type1`.
    pub current_height: Option<BlockHeight>,
    pub broker_sig: Signature,
}

impl HalfTx {
    pub fn unsigned_bytes(kind: HalfKind, raw: &RawCrossTx, current_height: Option<BlockHeight>) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(kind as u8).nested(raw);
        match current_height {
            Some(h) => enc.u8(1).u64(h),
            None => enc.u8(0),
        };
        enc.finish()
    }

    pub fn verify_broker(&self) -> bool {
        verify(
            &Self::unsigned_bytes(self.kind, &self.raw, self.current_height),
            &self.broker_sig,
            &self.raw.broker,
            &account_secret(&self.raw.broker),
        )
    }

    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            HalfKind::Type1 => self.current_height.is_some(),
            HalfKind::Type2 => self.current_height.is_none(),
        }
    }
}

impl Canonical for HalfTx {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&Self::unsigned_bytes(self.kind, &self.raw, self.current_height))
            .digest(&self.broker_sig.0);
    }
}

/// γ: proof that Θ1 (not Θ2) was included at the destination shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureProof {
    pub theta1: HalfTx,
    pub dest: ShardId,
    pub dest_height: BlockHeight,
    pub merkle_path: MerklePath,
}

impl FailureProof {
    /// Checks the path against the transaction root of the destination block.
    pub fn verify_against(&self, dest_tx_root: &Digest) -> bool {
        if self.theta1.kind != HalfKind::Type1 {
            return false;
        }
        let leaf = Transaction::theta1_at_dest(self.theta1.clone()).digest();
        verify_path(&leaf, &self.merkle_path, dest_tx_root)
    }
}

impl Canonical for FailureProof {
    fn encode(&self, enc: &mut Encoder) {
        enc.nested(&self.theta1).u32(self.dest.0).u64(self.dest_height);
        for step in &self.merkle_path {
            enc.digest(&step.sibling).u8(step.side as u8);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxKind {
    Plain,
    Theta1,
    Theta2,
    Relay,
    FailureProof,
}

/// Which half of a relayed (Monoxide-style) cross-shard transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelayLeg {
    /// Debit at the source; on application a deposit is forwarded.
    Deduct,
    /// System-generated credit at the destination; no nonce check.
    Deposit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxPayload {
    None,
    /// Θ1 at the source shard, or Θ2 at the destination shard.
    Half(Box<HalfTx>),
    /// Θ1 included at the destination shard on the failure path.
    Theta1AtDest(Box<HalfTx>),
    Relay(RelayLeg),
    Proof(Box<FailureProof>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    /// Workload transaction this one belongs to (0 for system transactions).
    pub id: u64,
    pub from: Address,
    pub to: Address,
    pub value: Tokens,
    pub nonce: u64,
    pub payload: TxPayload,
    pub timestamp: SimTime,
}

impl Transaction {
    pub fn plain(id: u64, from: Address, to: Address, value: Tokens, nonce: u64, timestamp: SimTime) -> Self {
        Transaction {
            id,
            from,
            to,
            value,
            nonce,
            payload: TxPayload::None,
            timestamp,
        }
    }

    pub fn theta1(id: u64, half: HalfTx, timestamp: SimTime) -> Self {
        Transaction {
            id,
            from: half.raw.payer,
            to: half.raw.broker,
            value: half.raw.value,
            nonce: half.raw.payer_nonce,
            payload: TxPayload::Half(Box::new(half)),
            timestamp,
        }
    }

    pub fn theta2(id: u64, half: HalfTx, timestamp: SimTime) -> Self {
        Transaction {
            id,
            from: half.raw.broker,
            to: half.raw.payee,
            value: half.raw.value,
            nonce: half.raw.broker_nonce,
            payload: TxPayload::Half(Box::new(half)),
            timestamp,
        }
    }

    /// Fully determined by Θ1 so a failure proof can recompute its leaf.
    pub fn theta1_at_dest(half: HalfTx) -> Self {
        Transaction {
            id: 0,
            from: half.raw.broker,
            to: half.raw.broker,
            value: 0,
            nonce: half.raw.broker_nonce,
            payload: TxPayload::Theta1AtDest(Box::new(half)),
            timestamp: SimTime::ZERO,
        }
    }

    pub fn failure_proof(id: u64, proof: FailureProof, timestamp: SimTime) -> Self {
        let raw = &proof.theta1.raw;
        Transaction {
            id,
            from: raw.broker,
            to: raw.payer,
            value: raw.value,
            nonce: 0,
            payload: TxPayload::Proof(Box::new(proof)),
            timestamp,
        }
    }

    pub fn relay(id: u64, from: Address, to: Address, value: Tokens, nonce: u64, leg: RelayLeg, timestamp: SimTime) -> Self {
        Transaction {
            id,
            from,
            to,
            value,
            nonce,
            payload: TxPayload::Relay(leg),
            timestamp,
        }
    }

    pub fn kind(&self) -> TxKind {
        match &self.payload {
            TxPayload::None => TxKind::Plain,
            TxPayload::Half(h) => match h.kind {
                HalfKind::Type1 => TxKind::Theta1,
                HalfKind::Type2 => TxKind::Theta2,
            },
            TxPayload::Theta1AtDest(_) => TxKind::Theta1,
            TxPayload::Relay(_) => TxKind::Relay,
            TxPayload::Proof(_) => TxKind::FailureProof,
        }
    }

    pub fn half(&self) -> Option<&HalfTx> {
        match &self.payload {
            TxPayload::Half(h) | TxPayload::Theta1AtDest(h) => Some(h),
            TxPayload::Proof(p) => Some(&p.theta1),
            _ => None,
        }
    }
}

impl Canonical for Transaction {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.id)
            .bytes(&self.from.0)
            .bytes(&self.to.0)
            .u128(self.value)
            .u64(self.nonce)
            .u64(self.timestamp.0);
        match &self.payload {
            TxPayload::None => enc.u8(0),
            TxPayload::Half(h) => enc.u8(1).nested(h.as_ref()),
            TxPayload::Theta1AtDest(h) => enc.u8(2).nested(h.as_ref()),
            TxPayload::Relay(leg) => enc.u8(3).u8(*leg as u8),
            TxPayload::Proof(p) => enc.u8(4).nested(p.as_ref()),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub shard: ShardId,
    pub height: BlockHeight,
    pub prev_hash: Digest,
    pub tx_root: Digest,
    pub state_root: Digest,
    pub produced_at: SimTime,
}

impl Canonical for BlockHeader {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.shard.0)
            .u64(self.height)
            .digest(&self.prev_hash)
            .digest(&self.tx_root)
            .digest(&self.state_root)
            .u64(self.produced_at.0);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxBlock {
    pub header: BlockHeader,
    pub txs: Vec<Transaction>,
}

impl TxBlock {
    pub fn hash(&self) -> Digest {
        self.header.digest()
    }

    pub fn tx_digests(&self) -> Vec<Digest> {
        self.txs.iter().map(Canonical::digest).collect()
    }

    pub fn recompute_tx_root(&self) -> Digest {
        tx_root(&self.tx_digests())
    }
}

pub fn tx_root(digests: &[Digest]) -> Digest {
    merkle_root(digests).unwrap_or_else(|_| empty_root())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxClass {
    Intra(ShardId),
    Cross { source: ShardId, dest: ShardId },
}

impl TxClass {
    pub fn is_cross(&self) -> bool {
        matches!(self, TxClass::Cross { .. })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("account {0} has no shard placement")]
pub struct UnknownAccount(pub Address);

/// Anything that can answer "where does this account live".
pub trait PlacementLookup {
    fn storage_map(&self, addr: &Address) -> Option<&StorageMap>;
}

/// Intra iff payer and payee share a shard (lowest shared index wins);
/// otherwise cross from the payer's lowest shard to the payee's lowest shard.
pub fn classify_tx(
    from: &Address,
    to: &Address,
    placement: &impl PlacementLookup,
) -> Result<TxClass, UnknownAccount> {
    let from_map = placement.storage_map(from).ok_or(UnknownAccount(*from))?;
    let to_map = placement.storage_map(to).ok_or(UnknownAccount(*to))?;
    if let Some(shared) = from_map.lowest_shared(to_map) {
        return Ok(TxClass::Intra(shared));
    }
    let source = from_map.lowest().ok_or(UnknownAccount(*from))?;
    let dest = to_map.lowest().ok_or(UnknownAccount(*to))?;
    Ok(TxClass::Cross { source, dest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct MapPlacement(HashMap<Address, StorageMap>);

    impl PlacementLookup for MapPlacement {
        fn storage_map(&self, addr: &Address) -> Option<&StorageMap> {
            self.0.get(addr)
        }
    }

    fn addr(b: u8) -> Address {
        Address([b; 20])
    }

    #[test]
    fn sign_is_deterministic() {
        let a = addr(1);
        let s1 = sign(b"", &a, b"s");
        let s2 = sign(b"", &a, b"s");
        assert_eq!(s1, s2);
        assert!(verify(b"", &s1, &a, b"s"));
    }

    #[test]
    fn tampered_payload_fails() {
        let a = addr(1);
        let sig = sign(b"pay 10", &a, b"s");
        assert!(!verify(b"pay 11", &sig, &a, b"s"));
        let mut flipped = b"pay 10".to_vec();
        flipped[0] ^= 1;
        assert!(!verify(&flipped, &sig, &a, b"s"));
    }

    #[test]
    fn substituted_signer_fails() {
        let (a, b) = (addr(1), addr(2));
        let sig = sign(b"payload", &a, b"s");
        // Oracle: recompute with B and compare.
        assert_ne!(sign(b"payload", &b, b"s"), sig);
        assert!(!verify(b"payload", &sig, &b, b"s"));
    }

    #[test]
    fn address_hex_parsing() {
        let a = Address::from_hex("0x00000000000000000000000000000000000000ff").unwrap();
        assert_eq!(a.0[19], 0xff);
        assert_eq!(Address::from_hex("ff").unwrap(), a);
        assert_eq!(a.to_hex().parse::<Address>().unwrap(), a);
        assert!(matches!(Address::from_hex("0xzz"), Err(AddressParseError::BadChar('z'))));
        assert!(matches!(Address::from_hex(&"1".repeat(41)), Err(AddressParseError::TooLong(41))));
        assert_eq!(Address::from_hex("0x"), Err(AddressParseError::Empty));
    }

    #[test]
    fn prefix_bits() {
        let mut a = Address([0u8; 20]);
        a.0[0] = 0b1010_0000;
        assert_eq!(a.prefix_bits(3), 0b101);
        assert_eq!(a.prefix_bits(0), 0);
    }

    #[test]
    fn classification_examples() {
        let (a, b, c) = (addr(0xa), addr(0xb), addr(0xc));
        let mut m = HashMap::new();
        m.insert(a, StorageMap::single(2, ShardId(1)));
        m.insert(b, StorageMap::single(2, ShardId(1)));
        let p = MapPlacement(m.clone());
        assert_eq!(classify_tx(&a, &b, &p).unwrap(), TxClass::Intra(ShardId(1)));

        m.insert(b, StorageMap::single(3, ShardId(2)).resized(3));
        m.insert(a, StorageMap::single(3, ShardId(1)));
        let p = MapPlacement(m.clone());
        assert_eq!(
            classify_tx(&a, &b, &p).unwrap(),
            TxClass::Cross { source: ShardId(1), dest: ShardId(2) }
        );

        // Broker segmented into shards {1, 2}.
        let mut seg = StorageMap::empty(3);
        seg.set(ShardId(1), true);
        seg.set(ShardId(2), true);
        m.insert(c, seg);
        let p = MapPlacement(m);
        assert_eq!(classify_tx(&a, &c, &p).unwrap(), TxClass::Intra(ShardId(1)));
        assert_eq!(classify_tx(&a, &addr(0xd), &p), Err(UnknownAccount(addr(0xd))));
    }

    #[test]
    fn half_tx_shape() {
        let payer = addr(1);
        let broker = addr(3);
        let bytes = RawCrossTx::signing_bytes(&payer, &addr(2), 10, &broker, 40, 0, 0);
        let raw = RawCrossTx {
            payer,
            payee: addr(2),
            value: 10,
            broker,
            lock_duration: 40,
            payer_nonce: 0,
            broker_nonce: 0,
            payer_sig: sign(&bytes, &payer, &account_secret(&payer)),
        };
        assert!(raw.verify_payer());
        let t1 = HalfTx {
            kind: HalfKind::Type1,
            raw: raw.clone(),
            current_height: None,
            broker_sig: Signature(Digest::ZERO),
        };
        assert!(!t1.is_well_formed());
        let tx = Transaction::theta1_at_dest(t1.clone());
        assert_eq!(tx.kind(), TxKind::Theta1);
        assert_eq!(tx.digest(), Transaction::theta1_at_dest(t1).digest());
    }
}
