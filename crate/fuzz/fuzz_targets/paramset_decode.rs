#![no_main]

use cascade_tensor::ParamSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ps) = ParamSet::from_bytes(data) {
        let bytes = ps.to_bytes();
        let again = ParamSet::from_bytes(&bytes).expect("re-encoded set decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
