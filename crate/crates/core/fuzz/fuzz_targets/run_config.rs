#![no_main]

use libfuzzer_sys::fuzz_target;
use recast_core::config::parse_run_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_run_config(text);
    }
});
