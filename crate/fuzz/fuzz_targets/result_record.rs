#![no_main]

use conceptcf::guidance::ResultRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = ResultRecord::from_json(data);
});
