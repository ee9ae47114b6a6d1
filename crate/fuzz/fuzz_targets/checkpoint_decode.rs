#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use medtex::train::{CheckpointFile, DistillState};

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = CheckpointFile::decode(data, Path::new("fuzz")) {
        let _ = DistillState::from_checkpoint(&file);
    }
});
