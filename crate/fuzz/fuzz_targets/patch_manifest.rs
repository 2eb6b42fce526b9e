#![no_main]

use conceptcf::attribution::PatchManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = PatchManifest::from_json(data);
});
