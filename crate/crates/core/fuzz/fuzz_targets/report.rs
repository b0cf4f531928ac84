#![no_main]

use keysig::report::ReportDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = ReportDocument::from_json(data) {
        let _ = keysig::plot::render_svg(&r);
        let _ = r.curated(&r.config.pipeline.flags, &[]);
    }
});
