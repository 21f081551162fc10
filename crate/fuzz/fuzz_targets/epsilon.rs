#![no_main]

use advgdro::config::parse_epsilon;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(eps) = parse_epsilon(text) {
        assert!(eps.is_finite() && eps >= 0.0);
    }
});
