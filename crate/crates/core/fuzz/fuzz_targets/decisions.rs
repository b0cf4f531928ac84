#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(recs) = keysig::formats::parse_decisions(text) {
            for r in recs {
                let _ = keysig::formats::parse_decisions(&r.to_line()).expect("written line parses");
            }
        }
    }
});
