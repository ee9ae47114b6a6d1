#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, mask)) = medtex::data::decode_mask_png(data) {
        assert_eq!(mask.len(), w * h);
    }
});
