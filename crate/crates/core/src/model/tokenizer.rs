//! Byte-level tokenizer: ids 0–255 are raw UTF-8 bytes, followed by three
//! special tokens.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const MIN_VOCAB: usize = 259;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Special and out-of-range ids contribute nothing.
pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}

pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect()
}

/// Printable label for one token, used for attention-map axes.
pub fn token_label(id: u32) -> String {
    match id {
        BOS => "<bos>".to_string(),
        EOS => "<eos>".to_string(),
        PAD => "<pad>".to_string(),
        b @ 0x21..=0x7e => char::from(b as u8).to_string(),
        0x20 => "\u{2423}".to_string(),
        other if other < 256 => format!("\\x{other:02x}"),
        other => format!("<{other}>"),
    }
}
