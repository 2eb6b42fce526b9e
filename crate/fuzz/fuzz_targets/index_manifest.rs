#![no_main]

use conceptcf::target::IndexManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = IndexManifest::from_json(data);
});
