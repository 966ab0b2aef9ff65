#![no_main]

use libfuzzer_sys::fuzz_target;
use recast_core::persist::{decode_checkpoint, snapshot_checkpoint, snapshot_from_checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = decode_checkpoint(data) else { return };
    if let Ok(value) = snapshot_from_checkpoint(ckpt) {
        let back = snapshot_from_checkpoint(snapshot_checkpoint(&value).unwrap()).unwrap();
        assert_eq!(back, value);
    }
});
