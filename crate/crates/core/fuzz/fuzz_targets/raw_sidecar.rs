#![no_main]

use keysig::volume::{parse_raw, RawSidecar};
use libfuzzer_sys::fuzz_target;

// first byte splits the input into sidecar JSON and voxel payload
fuzz_target!(|data: &[u8]| {
    let Some((&split, rest)) = data.split_first() else { return };
    let cut = (split as usize).min(rest.len());
    let (json, payload) = rest.split_at(cut);
    if let Ok(sidecar) = RawSidecar::parse(json) {
        let _ = parse_raw(payload, &sidecar);
    }
});
