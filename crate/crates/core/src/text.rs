//! Shared text normalization: lowercase + whitespace collapse.
//!
//! This is the round-trip modulus of the tokenizer and the tokenization used
//! by the evaluation metrics, so corpus, model outputs and references all
//! compare in the same space.

/// Lowercases and collapses runs of whitespace to single spaces, trimming
/// the ends.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace tokens of the normalized text.
pub fn tokens(text: &str) -> Vec<String> {
    normalize(text)
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}
