#![no_main]

use advgdro::cli::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = serde_json::from_slice::<RunManifest>(data) {
        let text = serde_json::to_vec(&m).expect("manifest serializes");
        let _: RunManifest = serde_json::from_slice(&text).expect("round trip");
    }
});
