#![no_main]

use std::collections::BTreeSet;

use brokershard::partition::StateGraph;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(graph) = StateGraph::parse_edge_list(text, BTreeSet::new()) else { return };
    let again = StateGraph::parse_edge_list(&graph.to_edge_list(), BTreeSet::new()).unwrap();
    assert_eq!(again.to_edge_list(), graph.to_edge_list());
});
