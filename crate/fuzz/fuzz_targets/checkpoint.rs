#![no_main]

use libfuzzer_sys::fuzz_target;
use ucapsnet::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        // the container has exactly one encoding
        assert_eq!(c.to_bytes(), data);
    }
});
