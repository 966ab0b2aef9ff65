#![no_main]

use libfuzzer_sys::fuzz_target;
use recast_core::persist::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must survive a re-encode unchanged.
    if let Ok(ckpt) = decode_checkpoint(data) {
        if let Ok(bytes) = encode_checkpoint(&ckpt) {
            let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
            assert_eq!(again.kind, ckpt.kind);
            assert_eq!(again.tensors.len(), ckpt.tensors.len());
            assert_eq!(encode_checkpoint(&again).unwrap(), bytes);
        }
    }
});
