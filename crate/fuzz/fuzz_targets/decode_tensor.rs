#![no_main]

use libfuzzer_sys::fuzz_target;
use mfanet::formats::{AnyTensor, decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        let bytes = match &t {
            AnyTensor::F32(t) => encode_tensor(t),
            AnyTensor::F64(t) => encode_tensor(t),
        };
        assert_eq!(bytes, data);
    }
});
