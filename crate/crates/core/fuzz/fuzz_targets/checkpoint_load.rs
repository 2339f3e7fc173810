#![no_main]

use expres::format;
use expres::vit::{VitConfig, VitWeights};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let cfg = VitConfig { image_size: 4, patch_size: 2, d: 4, layers: 1, heads: 1, mlp_ratio: 2, channels: 3 };
    if let Ok(archive) = format::decode_archive(data) {
        if let Ok(w) = VitWeights::from_archive(&cfg, archive) {
            assert_eq!(w.config(), &cfg);
        }
    }
});
