#![no_main]

use expres::format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = format::decode_archive(data) {
        assert_eq!(format::encode_archive(&a).unwrap(), data);
    }
});
