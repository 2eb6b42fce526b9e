#![no_main]

use conceptcf::archive::TensorArchive;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = TensorArchive::decode(data) {
        // compared as bytes so NaN payloads round-trip too
        let bytes = a.encode();
        let again = TensorArchive::decode(&bytes).expect("re-encoded archive decodes");
        assert_eq!(again.encode(), bytes);
    }
});
