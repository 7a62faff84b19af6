#![no_main]

use std::path::Path;

use cascade_denoise::io::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_manifest(text, Path::new("clips"), "fuzz.txt");
    }
});
