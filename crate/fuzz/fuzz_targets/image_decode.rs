#![no_main]

use libfuzzer_sys::fuzz_target;
use ucapsnet::colourspace::{rgb_to_lab, RgbImage};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = RgbImage::decode(data) {
        if img.width() * img.height() <= 1 << 16 {
            let _ = rgb_to_lab(&img);
        }
    }
});
