#![no_main]

use advgdro::config::{parse_config, resolve_train, train_keys, TRAIN_KEYS};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(kv) = parse_config(text, TRAIN_KEYS) else { return };
    if let Ok(cfg) = resolve_train(&kv) {
        let again = resolve_train(&train_keys(&cfg)).expect("resolved keys resolve");
        assert_eq!(train_keys(&again), train_keys(&cfg));
    }
});
