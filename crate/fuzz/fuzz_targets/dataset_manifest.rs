#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use medtex::data::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Anything that parses must survive a print/parse round trip.
    if let Ok(m) = DatasetManifest::parse(text, Path::new("fuzz")) {
        let again = DatasetManifest::parse(&m.to_text(), Path::new("fuzz")).expect("re-parse");
        assert_eq!(m, again);
    }
});
