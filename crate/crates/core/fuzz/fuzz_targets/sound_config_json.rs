#![no_main]

use libfuzzer_sys::fuzz_target;
use seasound::sounder::SoundConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = SoundConfig::from_json(text) {
        cfg.channel().expect("validated config has a resolvable channel");
    }
});
