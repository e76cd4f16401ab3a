#![no_main]

use brokershard::digest::{Canonical, Digest};
use brokershard::ledger::{FailureProof, HalfKind, Transaction};
use brokershard::merkle::Side;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(proof) = serde_json::from_slice::<FailureProof>(data) else { return };
    let leaf = Transaction::theta1_at_dest(proof.theta1.clone()).digest();
    let root = proof.merkle_path.iter().fold(leaf, |acc, step| match step.side {
        Side::Left => Digest::combine(&step.sibling, &acc),
        Side::Right => Digest::combine(&acc, &step.sibling),
    });
    assert_eq!(proof.verify_against(&root), proof.theta1.kind == HalfKind::Type1);
    let _ = proof.verify_against(&Digest::ZERO);
});
