#![no_main]

use libfuzzer_sys::fuzz_target;
use seasound::iq::{decode_cf32, encode_cf32};

fuzz_target!(|data: &[u8]| {
    if let Ok(samples) = decode_cf32(data) {
        assert_eq!(samples.len() * 8, data.len());
        // Finite f32 values survive the widening and narrowing unchanged.
        assert_eq!(encode_cf32(&samples), data);
    }
});
