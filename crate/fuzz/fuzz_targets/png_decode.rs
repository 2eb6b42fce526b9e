#![no_main]

use conceptcf::data::decode_png;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
});
