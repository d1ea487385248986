#![no_main]

use libfuzzer_sys::fuzz_target;
use mfanet::dataset::Manifest;

fuzz_target!(|text: &str| {
    if let Ok(m) = Manifest::parse(text) {
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }
});
