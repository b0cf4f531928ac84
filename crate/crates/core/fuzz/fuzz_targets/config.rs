#![no_main]

use keysig::config::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = PipelineConfig::from_toml(text);
        let _ = PipelineConfig::from_json(text);
    }
});
