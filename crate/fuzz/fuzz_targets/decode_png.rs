#![no_main]

use libfuzzer_sys::fuzz_target;
use mfanet::dataset::{PixelFormat, decode_image, decode_mask, encode_mask};

fuzz_target!(|data: &[u8]| {
    for format in [PixelFormat::Hu16, PixelFormat::Gray8] {
        if let Ok(img) = decode_image(data, format, "fuzz") {
            assert_eq!(img.pixels().len(), img.width() * img.height());
        }
    }
    if let Ok(mask) = decode_mask(data, "fuzz") {
        assert_eq!(decode_mask(&encode_mask(&mask), "fuzz").unwrap(), mask);
    }
});
