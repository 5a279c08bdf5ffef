#![no_main]

use laffi_core::corpus::{parse_squad, JsonlRecord};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(examples) = parse_squad(text) {
        for ex in &examples {
            ex.validate().expect("parser output validates");
        }
    }
});
