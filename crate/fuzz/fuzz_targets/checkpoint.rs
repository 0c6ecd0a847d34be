#![no_main]

use deq_core::harness::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        // Anything accepted must survive a round trip unchanged.
        let again = decode_checkpoint(&encode_checkpoint(&ck)).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again), encode_checkpoint(&ck));
    }
});
