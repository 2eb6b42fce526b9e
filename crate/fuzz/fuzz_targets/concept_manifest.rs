#![no_main]

use conceptcf::guidance::ConceptManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = ConceptManifest::from_json(data);
});
