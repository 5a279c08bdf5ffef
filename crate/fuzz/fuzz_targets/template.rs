#![no_main]

use laffi_core::corpus::{Bindings, PromptTemplate};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(t) = PromptTemplate::parse("fuzz", text) else {
        return;
    };
    let b = Bindings {
        passage: Some("p {question}"),
        question: Some("q"),
        predicted_answer: Some("a"),
        gold_answer: Some("g"),
    };
    for shots in 0..=t.exemplars.len() {
        let _ = t.render(&b, shots);
    }
    let _ = t.validate_answer_template();
});
