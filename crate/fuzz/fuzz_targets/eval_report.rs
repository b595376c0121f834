#![no_main]

use libfuzzer_sys::fuzz_target;
use ucapsnet::evaluation::EvalReport;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = EvalReport::read_csv(data) {
        let _ = (r.mean(), r.median(), r.stddev());
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let _ = EvalReport::read_csv(out.as_slice());
    }
});
