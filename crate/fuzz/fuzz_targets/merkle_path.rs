#![no_main]

use brokershard::digest::Digest;
use brokershard::merkle::{merkle_path, merkle_root, verify_path};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&pick, rest)) = data.split_first() else { return };
    let leaves: Vec<Digest> = rest.chunks(8).map(Digest::hash).collect();
    let Ok(root) = merkle_root(&leaves) else { return };
    let index = pick as usize % leaves.len();
    let path = merkle_path(&leaves, index).unwrap();
    assert!(verify_path(&leaves[index], &path, &root));
    let forged = Digest::hash(&[rest.len() as u8, pick, 0xff]);
    if !leaves.contains(&forged) {
        assert!(!verify_path(&forged, &path, &root));
    }
});
