#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, pixels)) = medtex::data::decode_rgb_png(data) {
        assert_eq!(pixels.len(), 3 * w * h);
        assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
