#![no_main]

use advgdro::data::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::parse(text) {
        let again = DatasetManifest::parse(&m.to_text()).expect("round trip");
        assert_eq!((again.n, again.d, again.groups), (m.n, m.d, m.groups));
    }
});
