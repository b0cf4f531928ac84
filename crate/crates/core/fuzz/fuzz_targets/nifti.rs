#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = keysig::volume::parse_nifti(data) {
        assert_eq!(v.data().len(), v.dims().iter().product::<usize>());
    }
});
