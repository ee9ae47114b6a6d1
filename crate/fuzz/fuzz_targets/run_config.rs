#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use medtex::cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((cfg, _)) = RunConfig::parse(text, Path::new("fuzz")) {
            let _ = cfg.train.validate();
            let _ = cfg.to_toml();
        }
    }
});
