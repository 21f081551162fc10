#![no_main]

use advgdro::data::{parse_grouped_csv, Arity, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = parse_grouped_csv(text, None, Split::Train) {
        let again = parse_grouped_csv(&ds.to_csv(), None, Split::Train).expect("round trip");
        assert_eq!(again.group_sizes(), ds.group_sizes());
    }
    let _ = parse_grouped_csv(text, Some(Arity { classes: 2, groups: 4 }), Split::Test);
});
