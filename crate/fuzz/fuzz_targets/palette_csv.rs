#![no_main]

use libfuzzer_sys::fuzz_target;
use ucapsnet::gamut::GamutPalette;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = GamutPalette::read_csv(data, 10.0) {
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        assert_eq!(GamutPalette::read_csv(out.as_slice(), 10.0).unwrap(), p);
        if !p.is_empty() {
            let q = p.nearest(3.0, -7.0);
            assert!(q < p.len());
        }
    }
});
