#![no_main]

use libfuzzer_sys::fuzz_target;
use medtex::train::{format_metrics_line, parse_metrics_line};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((step, terms)) = parse_metrics_line(line) {
        let again = parse_metrics_line(&format_metrics_line(step, &terms)).expect("re-parse");
        assert_eq!(again.0, step);
    }
});
