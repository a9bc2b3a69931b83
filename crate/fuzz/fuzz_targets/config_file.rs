#![no_main]

use libfuzzer_sys::fuzz_target;
use louiskv::config::{ConfigFile, PolicyConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(file) = ConfigFile::parse(text) {
        let mut cfg = PolicyConfig::default();
        let _ = file.apply(&mut cfg);
        let _ = file.section("gen");
    }
});
