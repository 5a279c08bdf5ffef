#![no_main]

use laffi_core::corpus::make_synthetic_corpus;
use laffi_core::eval::{evaluate, parse_predictions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(preds) = parse_predictions(text) else { return };
    let dataset = make_synthetic_corpus(4, 0);
    if let Ok(r) = evaluate(&preds, &dataset) {
        for v in [r.accuracy, r.f1, r.precision, r.recall] {
            assert!((0.0..=100.0).contains(&v));
        }
    }
});
