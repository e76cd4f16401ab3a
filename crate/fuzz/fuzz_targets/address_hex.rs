#![no_main]

use brokershard::ledger::Address;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(addr) = Address::from_hex(text) {
        assert_eq!(Address::from_hex(&addr.to_hex()).unwrap(), addr);
    }
});
