#![no_main]

use brokershard::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = Config::from_json(text) else { return };
    let canonical = cfg.to_json();
    let again = Config::from_json(&canonical).unwrap();
    assert_eq!(again.to_json(), canonical);
});
