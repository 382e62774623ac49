#![no_main]

use libfuzzer_sys::fuzz_target;
use ubna_core::modelio::{decode, encode};

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(ckpt) = decode(data) {
        assert_eq!(encode(&ckpt).expect("decoded checkpoint encodes"), data);
    }
});
