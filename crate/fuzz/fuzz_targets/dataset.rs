#![no_main]

use deq_core::tasks::{decode_dataset, decode_header, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_header(data);
    if let Ok((header, ds)) = decode_dataset(data) {
        assert_eq!(header.count, ds.count());
        let (_, again) = decode_dataset(&encode_dataset(&ds, header.seed)).expect("re-encoded dump decodes");
        assert_eq!(again, ds);
    }
});
