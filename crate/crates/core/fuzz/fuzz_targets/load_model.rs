#![no_main]

use libfuzzer_sys::fuzz_target;
use recast_core::persist::{decode_checkpoint, model_checkpoint, model_from_checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = decode_checkpoint(data) else { return };
    if let Ok(value) = model_from_checkpoint(ckpt) {
        let back = model_from_checkpoint(model_checkpoint(&value).unwrap()).unwrap();
        assert_eq!(back, value);
    }
});
