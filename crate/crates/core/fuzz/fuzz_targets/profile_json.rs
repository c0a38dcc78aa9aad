#![no_main]

use libfuzzer_sys::fuzz_target;
use seasound::channel::ChannelProfile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(profile) = ChannelProfile::from_json(text) {
        let again = ChannelProfile::from_json(&profile.to_json()).expect("own output parses");
        assert_eq!(again, profile);
    }
});
