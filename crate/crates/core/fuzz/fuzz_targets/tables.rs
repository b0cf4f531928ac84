#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = keysig::formats::parse_metadata(data);
    let _ = keysig::formats::parse_relations(data);
});
