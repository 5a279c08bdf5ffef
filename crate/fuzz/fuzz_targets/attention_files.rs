#![no_main]

use laffi_core::attention::{parse_csv, parse_pgm, to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((w, h, max, px)) = parse_pgm(text) {
        assert_eq!(px.len(), w * h);
        assert!(px.iter().all(|&p| p <= max));
    }
    if let Ok(m) = parse_csv(text) {
        assert_eq!(m.matrix.len(), m.len() * m.len());
        if m.matrix.iter().all(|v| v.is_finite()) {
            let _ = to_csv(&m);
        }
    }
});
