//! Replays the checked-in fuzz seeds through the same round-trip checks the
//! fuzz targets make.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use brokershard::config::Config;
use brokershard::digest::{Canonical, Digest};
use brokershard::ledger::{Address, FailureProof, Transaction};
use brokershard::merkle::{merkle_path, merkle_root, verify_path, Side};
use brokershard::partition::StateGraph;
use brokershard::workload::{parse_csv_trace, write_csv_trace};

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    assert!(!paths.is_empty(), "no seeds in {}", dir.display());
    paths.into_iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn address_seeds() {
    let mut parsed = 0;
    for s in seeds("address_hex") {
        if let Ok(a) = Address::from_hex(std::str::from_utf8(&s).unwrap()) {
            assert_eq!(Address::from_hex(&a.to_hex()).unwrap(), a);
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}

#[test]
fn csv_trace_seeds() {
    for s in seeds("csv_trace") {
        let load = parse_csv_trace(s.as_slice()).unwrap();
        let mut out = Vec::new();
        write_csv_trace(&load.txs, &mut out).unwrap();
        assert_eq!(parse_csv_trace(out.as_slice()).unwrap().txs, load.txs);
    }
}

#[test]
fn config_seeds() {
    let mut parsed = 0;
    for s in seeds("config_json") {
        if let Ok(cfg) = Config::from_json(std::str::from_utf8(&s).unwrap()) {
            let canonical = cfg.to_json();
            assert_eq!(Config::from_json(&canonical).unwrap().to_json(), canonical);
            parsed += 1;
        }
    }
    assert!(parsed >= 3);
}

#[test]
fn edge_list_seeds() {
    for s in seeds("edge_list") {
        let g = StateGraph::parse_edge_list(std::str::from_utf8(&s).unwrap(), BTreeSet::new()).unwrap();
        let again = StateGraph::parse_edge_list(&g.to_edge_list(), BTreeSet::new()).unwrap();
        assert_eq!(again.to_edge_list(), g.to_edge_list());
    }
}

#[test]
fn failure_proof_seeds() {
    for s in seeds("failure_proof") {
        let proof: FailureProof = serde_json::from_slice(&s).unwrap();
        let leaf = Transaction::theta1_at_dest(proof.theta1.clone()).digest();
        let root = proof.merkle_path.iter().fold(leaf, |acc, step| match step.side {
            Side::Left => Digest::combine(&step.sibling, &acc),
            Side::Right => Digest::combine(&acc, &step.sibling),
        });
        assert!(proof.verify_against(&root));
        assert!(!proof.verify_against(&Digest::ZERO));
    }
}

#[test]
fn merkle_seeds() {
    for s in seeds("merkle_path") {
        let (&pick, rest) = s.split_first().unwrap();
        let leaves: Vec<Digest> = rest.chunks(8).map(Digest::hash).collect();
        let root = merkle_root(&leaves).unwrap();
        let i = pick as usize % leaves.len();
        assert!(verify_path(&leaves[i], &merkle_path(&leaves, i).unwrap(), &root));
    }
}
