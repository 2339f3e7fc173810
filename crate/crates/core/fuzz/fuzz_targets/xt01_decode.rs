#![no_main]

use expres::format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = format::decode_tensor(data) {
        assert_eq!(format::tensor_to_bytes(&t), data);
    }
});
