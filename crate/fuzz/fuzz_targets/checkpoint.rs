#![no_main]

use advgdro::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ck) = Checkpoint::parse(text) {
        let again = Checkpoint::parse(&ck.to_text()).expect("round trip");
        assert_eq!(again.to_text(), ck.to_text());
    }
});
