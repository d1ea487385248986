#![no_main]

use libfuzzer_sys::fuzz_target;
use mfanet::formats::decode_checkpoint;
use mfanet::network::Network;

fuzz_target!(|data: &[u8]| {
    let parsed = decode_checkpoint(data);
    if let Ok(net) = Network::<f32>::from_checkpoint_bytes(data) {
        assert!(parsed.is_ok());
        let again = Network::<f32>::from_checkpoint_bytes(&net.checkpoint_bytes()).unwrap();
        assert_eq!(again.checkpoint_bytes(), net.checkpoint_bytes());
    }
});
