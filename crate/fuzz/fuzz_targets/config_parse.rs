#![no_main]

use cascade_denoise::config::Config;
use cascade_denoise::train::TrainConfig;
use cascade_denoise::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::parse(text, "fuzz.cfg") {
        let _ = ModelConfig::from_config(&cfg);
        let _ = TrainConfig::from_config(&cfg);
    }
});
