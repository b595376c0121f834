#![no_main]

use libfuzzer_sys::fuzz_target;
use ucapsnet::config::parse_key_values;
use ucapsnet::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_key_values(text);
    if let Ok(cfg) = TrainConfig::from_text(text) {
        let again = TrainConfig::from_text(&cfg.to_text()).expect("canonical text parses");
        assert_eq!(again.to_text(), cfg.to_text());
    }
});
