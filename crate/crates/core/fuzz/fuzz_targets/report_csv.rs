#![no_main]

use libfuzzer_sys::fuzz_target;
use recast_cli::report::{parse_table, render_report, to_dat};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_table(text) {
        assert!(table.rows.iter().all(|r| r.len() == table.header.len()));
        let _ = to_dat(&table);
        let _ = render_report(&[("fuzz.csv".into(), table)]);
    }
});
