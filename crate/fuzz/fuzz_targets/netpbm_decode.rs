#![no_main]
use libfuzzer_sys::fuzz_target;
use u3m::io::netpbm::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode(data) {
        assert_eq!(img.data.len(), img.width * img.height * img.channels);
        let bytes = encode(&img);
        assert_eq!(decode(&bytes).unwrap(), img);
    }
});
