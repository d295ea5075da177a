//! Hashing word-level tokenizer for policy and query text.

use crate::encoder::fnv1a;

pub const PAD_TOKEN: u32 = 0;
/// Opens a policy chunk.
pub const ANCHOR_OPEN: u32 = 1;
/// Closes a policy chunk.
pub const ANCHOR_CLOSE: u32 = 2;
const FIRST_TEXT_ID: u32 = 3;

/// Splits on whitespace; alphanumeric runs become words, every other
/// character is its own token. Words are lower-cased and hashed into
/// `3..vocab_size`.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    let span = (vocab_size as u64).saturating_sub(u64::from(FIRST_TEXT_ID)).max(1);
    let id = |piece: &str| FIRST_TEXT_ID + (fnv1a(piece.to_lowercase().as_bytes()) % span) as u32;
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(id(&word));
            word.clear();
        }
        if !ch.is_whitespace() {
            out.push(id(ch.encode_utf8(&mut [0; 4])));
        }
    }
    if !word.is_empty() {
        out.push(id(&word));
    }
    out
}

/// Chunk tokens wrapped in the two anchor ids.
pub fn anchored(text: &str, vocab_size: usize) -> Vec<u32> {
    let mut out = vec![ANCHOR_OPEN];
    out.extend(tokenize(text, vocab_size));
    out.push(ANCHOR_CLOSE);
    out
}
