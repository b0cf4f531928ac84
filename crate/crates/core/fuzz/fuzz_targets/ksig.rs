#![no_main]

use keysig::formats::{decode_signature, encode_signature};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(sig) = decode_signature(data) {
        let again = encode_signature(&sig).expect("decoded signature re-encodes");
        assert_eq!(decode_signature(&again).expect("re-encoded signature decodes").len(), sig.len());
    }
});
