#![no_main]

use laffi_core::corpus::{parse_jsonl, to_jsonl, FeedbackRecord, PredictedAnswerRecord, QAExample};
use libfuzzer_sys::fuzz_target;

fn round_trip<T: laffi_core::corpus::JsonlRecord + PartialEq + std::fmt::Debug>(text: &str) {
    if let Ok(xs) = parse_jsonl::<T>(text) {
        let again = to_jsonl(&xs).expect("parsed records serialize");
        assert_eq!(parse_jsonl::<T>(&again).expect("own output parses"), xs);
    }
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    round_trip::<QAExample>(text);
    round_trip::<PredictedAnswerRecord>(text);
    round_trip::<FeedbackRecord>(text);
});
