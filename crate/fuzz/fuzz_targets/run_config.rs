#![no_main]

use libfuzzer_sys::fuzz_target;
use mfanet::network::NetworkConfig;
use mfanet_cli::RunConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::parse(text) {
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
    if let Ok(cfg) = NetworkConfig::from_text(text) {
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
});
