//! Byte-level BPE tokenizer with reserved special tokens.
//!
//! The base alphabet is all 256 byte values plus an end-of-word marker, so
//! any input is representable without unknown-token handling. Input text is
//! normalized (lowercased, whitespace-collapsed) before tokenization; that
//! normalization is the documented round-trip modulus.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::text::normalize;

/// Reserved ids, always occupying the lowest range.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const LATENT_ID: u32 = 4;

const SPECIAL_NAMES: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<latent>"];
const NUM_SPECIALS: u32 = 5;
/// Internal symbol for the end-of-word marker (bytes are 0..=255).
const EOW_SYM: u16 = 256;
const EOW_ID: u32 = NUM_SPECIALS + 256;
/// Specials + 256 bytes + end-of-word marker.
pub const BASE_VOCAB: u32 = NUM_SPECIALS + 257;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocab size {target} too small; need > {BASE_VOCAB} (specials + byte alphabet)")]
    VocabTooSmall { target: u32 },
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("unknown token id {0} in decode")]
    UnknownId(u32),
    #[error("malformed vocab file: {0}")]
    MalformedVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token strings <-> contiguous ids plus the ordered merge rules.
#[derive(Debug, Clone)]
pub struct Vocab {
    /// id -> symbol sequence; specials hold an empty sequence.
    symbols: Vec<Vec<u16>>,
    /// ordered merges: (left id, right id) -> produced id = BASE + rank
    merges: Vec<(u32, u32)>,
    merge_lookup: HashMap<(u32, u32), u32>,
}

impl Vocab {
    pub fn size(&self) -> u32 {
        self.symbols.len() as u32
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    /// Trains byte-level BPE on the corpus. Deterministic for a fixed corpus
    /// and target size: merge candidates are ranked by count, ties broken by
    /// the smaller id pair.
    pub fn train_bpe<S: AsRef<str>>(
        corpus: &[S],
        target_vocab_size: u32,
    ) -> Result<Self, TokenizerError> {
        if target_vocab_size <= BASE_VOCAB {
            return Err(TokenizerError::VocabTooSmall {
                target: target_vocab_size,
            });
        }
        // word -> count, words as base-id sequences ending in the EOW marker
        let mut word_counts: HashMap<Vec<u32>, u64> = HashMap::new();
        for line in corpus {
            for word in normalize(line.as_ref()).split_whitespace() {
                let mut ids: Vec<u32> =
                    word.bytes().map(|b| NUM_SPECIALS + b as u32).collect();
                ids.push(EOW_ID);
                *word_counts.entry(ids).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut vocab = Self::base();
        let mut words: Vec<(Vec<u32>, u64)> = word_counts.into_iter().collect();
        while vocab.size() < target_vocab_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (word, count) in &words {
                for pair in word.windows(2) {
                    *pair_counts.entry((pair[0], pair[1])).or_insert(0) += count;
                }
            }
            let Some((&best, _)) = pair_counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            else {
                break; // nothing left to merge
            };
            let new_id = vocab.push_merge(best);
            for (word, _) in words.iter_mut() {
                let mut merged = Vec::with_capacity(word.len());
                let mut i = 0;
                while i < word.len() {
                    if i + 1 < word.len() && (word[i], word[i + 1]) == best {
                        merged.push(new_id);
                        i += 2;
                    } else {
                        merged.push(word[i]);
                        i += 1;
                    }
                }
                *word = merged;
            }
        }
        Ok(vocab)
    }

    fn base() -> Self {
        let mut symbols: Vec<Vec<u16>> = Vec::with_capacity(BASE_VOCAB as usize);
        for _ in 0..NUM_SPECIALS {
            symbols.push(Vec::new());
        }
        for b in 0u16..=255 {
            symbols.push(vec![b]);
        }
        symbols.push(vec![EOW_SYM]);
        Vocab {
            symbols,
            merges: Vec::new(),
            merge_lookup: HashMap::new(),
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let mut sym = self.symbols[pair.0 as usize].clone();
        sym.extend_from_slice(&self.symbols[pair.1 as usize]);
        self.symbols.push(sym);
        let new_id = self.symbols.len() as u32 - 1;
        self.merges.push(pair);
        self.merge_lookup.insert(pair, new_id);
        new_id
    }

    /// Encodes normalized text. Never emits special ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in normalize(text).split_whitespace() {
            let mut ids: Vec<u32> = word.bytes().map(|b| NUM_SPECIALS + b as u32).collect();
            ids.push(EOW_ID);
            // repeatedly apply the earliest-trained applicable merge
            loop {
                let mut best: Option<(u32, usize)> = None; // (produced id, position)
                for (i, pair) in ids.windows(2).enumerate() {
                    if let Some(&prod) = self.merge_lookup.get(&(pair[0], pair[1])) {
                        if best.map_or(true, |(b, _)| prod < b) {
                            best = Some((prod, i));
                        }
                    }
                }
                let Some((prod, pos)) = best else { break };
                ids[pos] = prod;
                ids.remove(pos + 1);
            }
            out.extend(ids);
        }
        out
    }

    /// Decodes ids back to text, skipping special ids. Unknown ids are an
    /// error; byte sequences that are not valid UTF-8 decode lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            if Vocab::is_special(id) {
                continue;
            }
            let sym = self
                .symbols
                .get(id as usize)
                .ok_or(TokenizerError::UnknownId(id))?;
            for &s in sym {
                if s == EOW_SYM {
                    bytes.push(b' ');
                } else {
                    bytes.push(s as u8);
                }
            }
        }
        let text = String::from_utf8_lossy(&bytes).into_owned();
        Ok(text.trim_end().to_string())
    }

    /// Plain-text vocab file: one token per line in id order, then a merge
    /// section. Loading reproduces `encode` bit-exactly.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        out.push_str(&format!("latentchat-vocab v1 {}\n", self.size()));
        for (id, sym) in self.symbols.iter().enumerate() {
            if (id as u32) < NUM_SPECIALS {
                out.push_str(SPECIAL_NAMES[id]);
            } else {
                out.push_str(&escape_symbols(sym));
            }
            out.push('\n');
        }
        out.push_str("#merges\n");
        for (a, b) in &self.merges {
            out.push_str(&format!("{a} {b}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let content = fs::read_to_string(path)?;
        let mut lines = content.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::MalformedVocabFile("empty file".into()))?;
        let size: u32 = header
            .strip_prefix("latentchat-vocab v1 ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TokenizerError::MalformedVocabFile("bad header".into()))?;
        let mut vocab = Self::base();
        // token lines are informational for the base+merge region; the merge
        // section is authoritative for reconstruction
        let mut token_lines = 0u32;
        for line in lines.by_ref() {
            if line == "#merges" {
                break;
            }
            token_lines += 1;
        }
        if token_lines != size {
            return Err(TokenizerError::MalformedVocabFile(format!(
                "header says {size} tokens, found {token_lines}"
            )));
        }
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let a: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TokenizerError::MalformedVocabFile(format!("bad merge: {line}")))?;
            let b: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TokenizerError::MalformedVocabFile(format!("bad merge: {line}")))?;
            if a >= vocab.size() || b >= vocab.size() {
                return Err(TokenizerError::MalformedVocabFile(format!(
                    "merge references unknown id: {line}"
                )));
            }
            vocab.push_merge((a, b));
        }
        if vocab.size() != size {
            return Err(TokenizerError::MalformedVocabFile(format!(
                "reconstructed {} tokens, header says {size}",
                vocab.size()
            )));
        }
        Ok(vocab)
    }

    /// Content hash used to pin checkpoints to their vocabulary.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.size().to_le_bytes());
        for (a, b) in &self.merges {
            hasher.update(a.to_le_bytes());
            hasher.update(b.to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

fn escape_symbols(sym: &[u16]) -> String {
    let mut out = String::new();
    for &s in sym {
        if s == EOW_SYM {
            out.push_str("\\w");
        } else {
            let b = s as u8;
            match b {
                b'\\' => out.push_str("\\\\"),
                0x21..=0x7e => out.push(b as char),
                _ => {
                    let _ = write!(out, "\\x{b:02x}");
                }
            }
        }
    }
    out
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_merge_on_repeated_pair() {
        // "aaab aaab": the dominant adjacent pair is (a, a)
        let vocab = Vocab::train_bpe(&["aaab aaab"], BASE_VOCAB + 1).unwrap();
        assert_eq!(vocab.merges().len(), 1);
        let a_id = NUM_SPECIALS + b'a' as u32;
        assert_eq!(vocab.merges()[0], (a_id, a_id));
    }

    #[test]
    fn empty_corpus_is_error() {
        let no_lines: [&str; 0] = [];
        assert!(matches!(
            Vocab::train_bpe(&no_lines, BASE_VOCAB + 10),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            Vocab::train_bpe(&["   "], BASE_VOCAB + 10),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn vocab_size_too_small_is_error() {
        assert!(matches!(
            Vocab::train_bpe(&["abc"], BASE_VOCAB),
            Err(TokenizerError::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn specials_present_exactly_once() {
        let vocab = Vocab::train_bpe(&["hello world"], BASE_VOCAB + 4).unwrap();
        for id in [PAD_ID, BOS_ID, EOS_ID, SEP_ID, LATENT_ID] {
            assert!(Vocab::is_special(id));
            assert!(vocab.symbols[id as usize].is_empty());
        }
        // no learned token may collide with the special range
        assert!(vocab.size() > BASE_VOCAB);
        // encode never emits specials
        let ids = vocab.encode("hello world hello");
        assert!(ids.iter().all(|&i| !Vocab::is_special(i)));
    }

    #[test]
    fn round_trip_and_empty() {
        let vocab = Vocab::train_bpe(&["hello world", "hello there"], BASE_VOCAB + 20).unwrap();
        let ids = vocab.encode("hello world");
        assert_eq!(vocab.decode(&ids).unwrap(), "hello world");
        assert!(vocab.encode("").is_empty());
        assert_eq!(vocab.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_strips_specials_and_rejects_unknown() {
        let vocab = Vocab::train_bpe(&["ab ab"], BASE_VOCAB + 2).unwrap();
        let mut ids = vec![BOS_ID, LATENT_ID];
        ids.extend(vocab.encode("ab"));
        ids.push(EOS_ID);
        ids.push(PAD_ID);
        assert_eq!(vocab.decode(&ids).unwrap(), "ab");
        assert!(matches!(
            vocab.decode(&[vocab.size()]),
            Err(TokenizerError::UnknownId(_))
        ));
    }

    #[test]
    fn encode_is_pure() {
        let vocab = Vocab::train_bpe(&["the quick brown fox"], BASE_VOCAB + 30).unwrap();
        assert_eq!(vocab.encode("quick fox"), vocab.encode("quick fox"));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["one two three two one", "three three one"];
        let a = Vocab::train_bpe(&corpus, BASE_VOCAB + 15).unwrap();
        let b = Vocab::train_bpe(&corpus, BASE_VOCAB + 15).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn vocab_file_round_trip_reproduces_encode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let corpus = ["do you like cats", "i like dogs very much", "cats are great"];
        let vocab = Vocab::train_bpe(&corpus, BASE_VOCAB + 40).unwrap();
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        for line in &corpus {
            assert_eq!(vocab.encode(line), loaded.encode(line));
        }
        assert_eq!(vocab.content_hash(), loaded.content_hash());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_modulo_normalization(s in "[a-z ?!.,0-9]{0,40}") {
            let vocab = Vocab::train_bpe(
                &["what do you say", "yes and no", "numbers 0 1 2 3"],
                BASE_VOCAB + 25,
            ).unwrap();
            let ids = vocab.encode(&s);
            prop_assert_eq!(vocab.decode(&ids).unwrap(), crate::text::normalize(&s));
        }
    }
}
