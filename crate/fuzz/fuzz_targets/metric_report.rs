#![no_main]

use conceptcf::metrics::MetricReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = MetricReport::from_json(data);
});
