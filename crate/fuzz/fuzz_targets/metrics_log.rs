#![no_main]

use libfuzzer_sys::fuzz_target;
use ucapsnet::training::read_metrics;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_metrics(data) {
        for r in &rows {
            let _ = r.csv_row();
        }
    }
});
