#![no_main]

use brokershard::workload::{parse_csv_trace, write_csv_trace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(load) = parse_csv_trace(data) else { return };
    let mut out = Vec::new();
    write_csv_trace(&load.txs, &mut out).unwrap();
    let again = parse_csv_trace(out.as_slice()).unwrap();
    assert_eq!(again.txs, load.txs);
});
