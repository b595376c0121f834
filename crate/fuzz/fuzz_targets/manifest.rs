#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use ucapsnet::training::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = DatasetManifest::parse(text, Path::new("root"), "train") {
        for p in &m.paths {
            let _ = m.resolve(p);
        }
    }
});
