//! Dialogue corpus: JSONL ingestion, batch assembly with token/turn/role/
//! position id grids, and a synthetic one-to-many corpus with an exact
//! membership oracle.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::normalize;
use crate::tokenizer::{hex, Vocab, BOS_ID, EOS_ID, LATENT_ID, PAD_ID, SEP_ID};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    InvalidSample { line: usize, reason: String },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("batch assembly: {0}")]
    Batch(String),
    #[error("synthetic generator: {0}")]
    Synthetic(String),
    #[error("oracle has no entry for context {0}")]
    MissingOracleEntry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One utterance with its speaker index (0 or 1).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Turn {
    pub role: u8,
    pub text: String,
}

/// Ordered context turns plus one reference response.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DialogueSample {
    pub context: Vec<Turn>,
    pub response: String,
}

impl DialogueSample {
    /// Speaker of the response: always the opposite of the last context turn.
    pub fn response_role(&self) -> u8 {
        1 - self.context.last().map(|t| t.role).unwrap_or(0)
    }

    fn validate(&self) -> Result<(), String> {
        if self.context.is_empty() {
            return Err("context must have at least one turn".into());
        }
        for turn in &self.context {
            if turn.role > 1 {
                return Err(format!("role {} out of range (0/1)", turn.role));
            }
        }
        for pair in self.context.windows(2) {
            if pair[0].role == pair[1].role {
                return Err("context roles must alternate between consecutive turns".into());
            }
        }
        Ok(())
    }
}

/// Loads one sample per line, reporting malformed lines by number.
pub fn load_jsonl(path: &Path) -> Result<Vec<DialogueSample>, CorpusError> {
    let content = fs::read_to_string(path)?;
    parse_jsonl(&content)
}

pub fn parse_jsonl(content: &str) -> Result<Vec<DialogueSample>, CorpusError> {
    let mut samples = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: DialogueSample =
            serde_json::from_str(line).map_err(|source| CorpusError::Parse {
                line: idx + 1,
                source,
            })?;
        sample.validate().map_err(|reason| CorpusError::InvalidSample {
            line: idx + 1,
            reason,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_jsonl(path: &Path, samples: &[DialogueSample]) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path)?;
    for s in samples {
        serde_json::to_writer(&mut f, s).map_err(|e| CorpusError::Batch(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Aligned id grids for a batch; masked positions carry the PAD id.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub batch: usize,
    /// context grid width
    pub ctx_len: usize,
    /// decoder grid width (BOS + response, padded)
    pub resp_len: usize,
    pub ctx_tokens: Vec<u32>,
    pub ctx_turns: Vec<u32>,
    pub ctx_roles: Vec<u32>,
    pub ctx_pos: Vec<u32>,
    pub ctx_mask: Vec<bool>,
    /// decoder input: BOS then response tokens
    pub resp_input: Vec<u32>,
    /// shifted target: response tokens then EOS; PAD on padding
    pub resp_target: Vec<u32>,
    /// posterior encoder input: LATENT then response tokens
    pub post_input: Vec<u32>,
    /// mask over `resp_input`/`post_input` positions
    pub resp_mask: Vec<bool>,
    /// bag-of-words targets: response tokens only (no EOS), PAD elsewhere
    pub bow_targets: Vec<u32>,
}

/// Caches per-sample token ids so repeated batch assembly during training
/// does not re-run BPE.
pub struct BatchBuilder {
    encoded: Vec<EncodedSample>,
    max_ctx: usize,
    max_resp: usize,
}

struct EncodedSample {
    /// per turn: token ids (SEP-terminated), turn distance, role
    turns: Vec<(Vec<u32>, u32, u32)>,
    resp: Vec<u32>,
}

/// Non-fatal issues found while assembling batches.
#[derive(Debug, Clone)]
pub struct BatchWarning {
    pub sample_index: usize,
    pub reason: String,
}

impl BatchBuilder {
    pub fn new(
        samples: &[DialogueSample],
        vocab: &Vocab,
        max_ctx: usize,
        max_resp: usize,
    ) -> (Self, Vec<BatchWarning>) {
        let mut encoded = Vec::with_capacity(samples.len());
        let mut warnings = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let resp = vocab.encode(&s.response);
            if resp.len() > max_resp {
                warnings.push(BatchWarning {
                    sample_index: i,
                    reason: format!(
                        "response of {} tokens exceeds max_resp {max_resp}; sample skipped",
                        resp.len()
                    ),
                });
                continue;
            }
            let k = s.context.len();
            let turns = s
                .context
                .iter()
                .enumerate()
                .map(|(t, turn)| {
                    let mut ids = vocab.encode(&turn.text);
                    ids.push(SEP_ID);
                    (ids, (k - t) as u32, turn.role as u32)
                })
                .collect();
            encoded.push(EncodedSample { turns, resp });
        }
        (
            Self {
                encoded,
                max_ctx,
                max_resp,
            },
            warnings,
        )
    }

    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }

    /// Assembles a batch from sample indices (into the retained samples).
    pub fn batch(&self, indices: &[usize], max_turn_id: u32) -> Result<EncodedBatch, CorpusError> {
        if indices.is_empty() {
            return Err(CorpusError::Batch("empty batch".into()));
        }
        let mut rows: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)> = Vec::with_capacity(indices.len());
        let mut resp_rows: Vec<&[u32]> = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .encoded
                .get(i)
                .ok_or_else(|| CorpusError::Batch(format!("sample index {i} out of range")))?;
            // truncation drops oldest turns first
            let mut start = 0usize;
            let total = |from: usize| -> usize {
                s.turns[from..].iter().map(|(ids, _, _)| ids.len()).sum()
            };
            while start + 1 < s.turns.len() && total(start) > self.max_ctx {
                start += 1;
            }
            let mut tokens = Vec::new();
            let mut turn_ids = Vec::new();
            let mut role_ids = Vec::new();
            for (ids, turn, role) in &s.turns[start..] {
                for &id in ids {
                    tokens.push(id);
                    turn_ids.push((*turn).min(max_turn_id));
                    role_ids.push(*role);
                }
            }
            // a single remaining turn may still be overlong: keep the suffix
            if tokens.len() > self.max_ctx {
                let cut = tokens.len() - self.max_ctx;
                tokens.drain(..cut);
                turn_ids.drain(..cut);
                role_ids.drain(..cut);
            }
            rows.push((tokens, turn_ids, role_ids));
            resp_rows.push(&s.resp);
        }

        let b = rows.len();
        let ctx_len = rows.iter().map(|(t, _, _)| t.len()).max().unwrap();
        let resp_len = resp_rows.iter().map(|r| r.len()).max().unwrap() + 1;
        debug_assert!(resp_len <= self.max_resp + 1);

        let mut batch = EncodedBatch {
            batch: b,
            ctx_len,
            resp_len,
            ctx_tokens: vec![PAD_ID; b * ctx_len],
            ctx_turns: vec![0; b * ctx_len],
            ctx_roles: vec![0; b * ctx_len],
            ctx_pos: vec![0; b * ctx_len],
            ctx_mask: vec![false; b * ctx_len],
            resp_input: vec![PAD_ID; b * resp_len],
            resp_target: vec![PAD_ID; b * resp_len],
            post_input: vec![PAD_ID; b * resp_len],
            resp_mask: vec![false; b * resp_len],
            bow_targets: vec![PAD_ID; b * resp_len],
        };
        for (r, (tokens, turns, roles)) in rows.iter().enumerate() {
            for (j, &id) in tokens.iter().enumerate() {
                let at = r * ctx_len + j;
                batch.ctx_tokens[at] = id;
                batch.ctx_turns[at] = turns[j];
                batch.ctx_roles[at] = roles[j];
                batch.ctx_pos[at] = j as u32;
                batch.ctx_mask[at] = true;
            }
        }
        for (r, resp) in resp_rows.iter().enumerate() {
            let base = r * resp_len;
            batch.resp_input[base] = BOS_ID;
            batch.post_input[base] = LATENT_ID;
            batch.resp_mask[base] = true;
            for (j, &id) in resp.iter().enumerate() {
                batch.resp_input[base + 1 + j] = id;
                batch.post_input[base + 1 + j] = id;
                batch.resp_target[base + j] = id;
                batch.bow_targets[base + j] = id;
                batch.resp_mask[base + 1 + j] = true;
            }
            batch.resp_target[base + resp.len()] = EOS_ID;
        }
        Ok(batch)
    }
}

/// One-shot batch assembly over whole sample slices.
pub fn build_batch(
    samples: &[DialogueSample],
    vocab: &Vocab,
    max_ctx: usize,
    max_resp: usize,
    max_turn_id: u32,
) -> Result<(EncodedBatch, Vec<BatchWarning>), CorpusError> {
    if samples.is_empty() {
        return Err(CorpusError::Batch("samples must be non-empty".into()));
    }
    let (builder, warnings) = BatchBuilder::new(samples, vocab, max_ctx, max_resp);
    if builder.is_empty() {
        return Err(CorpusError::Batch(
            "all samples were skipped during assembly".into(),
        ));
    }
    let indices: Vec<usize> = (0..builder.len()).collect();
    let batch = builder.batch(&indices, max_turn_id)?;
    Ok((batch, warnings))
}

/// Canonical key for a context: hash of the normalized turn sequence.
pub fn context_key(context: &[Turn]) -> String {
    let mut hasher = Sha256::new();
    for t in context {
        hasher.update([t.role]);
        hasher.update(normalize(&t.text).as_bytes());
        hasher.update([0xff]);
    }
    hex(&hasher.finalize())
}

/// Full valid-response sets per generated context, plus the seed that
/// produced them; membership is exact string equality after normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub seed: u64,
    /// context key -> (context turns, normalized valid responses)
    pub entries: BTreeMap<String, OracleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleEntry {
    pub context: Vec<Turn>,
    pub responses: Vec<String>,
}

impl SyntheticOracle {
    pub fn valid_responses(&self, context: &[Turn]) -> Result<&[String], CorpusError> {
        let key = context_key(context);
        self.entries
            .get(&key)
            .map(|e| e.responses.as_slice())
            .ok_or(CorpusError::MissingOracleEntry(key))
    }

    pub fn is_valid(&self, context: &[Turn], response: &str) -> Result<bool, CorpusError> {
        let norm = normalize(response);
        Ok(self.valid_responses(context)?.iter().any(|r| *r == norm))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path)?;
        for (key, entry) in &self.entries {
            let line = serde_json::json!({
                "context_hash": key,
                "context": entry.context,
                "responses": entry.responses,
            });
            serde_json::to_writer(&mut f, &line).map_err(|e| CorpusError::Batch(e.to_string()))?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        #[derive(Deserialize)]
        struct Line {
            context_hash: String,
            context: Vec<Turn>,
            responses: Vec<String>,
        }
        let content = fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line).map_err(|source| CorpusError::Parse {
                line: idx + 1,
                source,
            })?;
            entries.insert(
                parsed.context_hash,
                OracleEntry {
                    context: parsed.context,
                    responses: parsed.responses,
                },
            );
        }
        Ok(SyntheticOracle { seed: 0, entries })
    }
}

const ADJECTIVES: [&str; 12] = [
    "calm", "brave", "fancy", "quiet", "shiny", "rusty", "gentle", "spicy", "frozen", "golden",
    "misty", "velvet",
];
const NOUNS: [&str; 12] = [
    "cats", "dogs", "rivers", "pianos", "gardens", "comics", "trains", "lanterns", "noodles",
    "kites", "orchards", "parrots",
];

fn response_templates(adj: &str, noun: &str) -> Vec<String> {
    vec![
        format!("yes i really like {adj} {noun}"),
        format!("no i do not care for {adj} {noun}"),
        format!("i love {adj} {noun} so much"),
        format!("honestly {adj} {noun} bore me"),
        format!("{adj} {noun} are the best thing"),
        format!("{adj} {noun} seem strange to me"),
        "maybe a little".to_string(),
        "i am not sure about that".to_string(),
        format!("only {adj} ones"),
        format!("ask me about {noun} tomorrow"),
        "absolutely yes".to_string(),
        "definitely not".to_string(),
    ]
}

pub const MAX_K_VALID: usize = 12;

/// Question paraphrases per topic. Dialogue data pairs near-duplicate
/// contexts with different responses; that per-context uncertainty is what
/// lets the latent pathway carry response choice instead of the context
/// memorizing it, so the generator reproduces the structure: each topic
/// appears under several surface forms, each drawing its own answer.
const PARAPHRASES: usize = 4;

fn paraphrase_context(variant: usize, adj: &str, noun: &str) -> Vec<Turn> {
    let question = |lead: &str| Turn {
        role: 0,
        text: format!("{lead}do you like {adj} {noun}"),
    };
    match variant % PARAPHRASES {
        0 => vec![question("")],
        1 => vec![question("tell me ")],
        2 => vec![question("so ")],
        // one multi-turn variant per topic keeps turn/role ids > minimum
        // exercised during training
        _ => vec![
            Turn {
                role: 0,
                text: "hello there".into(),
            },
            Turn {
                role: 1,
                text: "hi how are you".into(),
            },
            question(""),
        ],
    }
}

/// Deterministic templated corpus: every context is a question about an
/// adjective-noun topic with `k_valid` acceptable answers, each topic asked
/// through several paraphrases; the training split keeps one uniformly
/// sampled answer per context and the oracle keeps the full set.
pub fn generate_synthetic(
    seed: u64,
    n_contexts: usize,
    k_valid: usize,
) -> Result<(Vec<DialogueSample>, SyntheticOracle), CorpusError> {
    if !(4..=MAX_K_VALID).contains(&k_valid) {
        return Err(CorpusError::Synthetic(format!(
            "k_valid must be in 4..={MAX_K_VALID}, got {k_valid}"
        )));
    }
    let max_contexts = ADJECTIVES.len() * NOUNS.len() * PARAPHRASES;
    if n_contexts == 0 || n_contexts > max_contexts {
        return Err(CorpusError::Synthetic(format!(
            "n_contexts must be in 1..={max_contexts}, got {n_contexts}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut topics: Vec<(usize, usize)> = (0..ADJECTIVES.len())
        .flat_map(|a| (0..NOUNS.len()).map(move |n| (a, n)))
        .collect();
    topics.shuffle(&mut rng);
    topics.truncate(n_contexts.div_ceil(PARAPHRASES));

    let mut samples = Vec::with_capacity(n_contexts);
    let mut entries = BTreeMap::new();
    'outer: for (a, n) in topics {
        let adj = ADJECTIVES[a];
        let noun = NOUNS[n];
        let responses: Vec<String> = response_templates(adj, noun)
            .into_iter()
            .take(k_valid)
            .map(|r| normalize(&r))
            .collect();
        for variant in 0..PARAPHRASES {
            let context = paraphrase_context(variant, adj, noun);
            let pick = rng.gen_range(0..k_valid);
            samples.push(DialogueSample {
                context: context.clone(),
                response: responses[pick].clone(),
            });
            entries.insert(
                context_key(&context),
                OracleEntry {
                    context,
                    responses: responses.clone(),
                },
            );
            if samples.len() == n_contexts {
                break 'outer;
            }
        }
    }
    Ok((samples, SyntheticOracle { seed, entries }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::BASE_VOCAB;

    fn test_vocab() -> Vocab {
        Vocab::train_bpe(
            &["hello there how are you", "do you like calm cats", "yes i do"],
            BASE_VOCAB + 30,
        )
        .unwrap()
    }

    fn sample(ctx: &[(u8, &str)], resp: &str) -> DialogueSample {
        DialogueSample {
            context: ctx
                .iter()
                .map(|&(role, text)| Turn {
                    role,
                    text: text.into(),
                })
                .collect(),
            response: resp.into(),
        }
    }

    #[test]
    fn parse_well_formed_two_lines() {
        let content = concat!(
            "{\"context\":[{\"role\":0,\"text\":\"hi\"}],\"response\":\"hello\"}\n",
            "{\"context\":[{\"role\":1,\"text\":\"yo\"}],\"response\":\"hey\"}\n",
        );
        let samples = parse_jsonl(content).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].response_role(), 1);
        assert_eq!(samples[1].response_role(), 0);
    }

    #[test]
    fn empty_context_reports_line() {
        let content = "{\"context\":[],\"response\":\"hello\"}\n";
        match parse_jsonl(content) {
            Err(CorpusError::InvalidSample { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn non_alternating_roles_rejected() {
        let content = "{\"context\":[{\"role\":0,\"text\":\"a\"},{\"role\":0,\"text\":\"b\"}],\"response\":\"c\"}\n";
        assert!(matches!(
            parse_jsonl(content),
            Err(CorpusError::InvalidSample { line: 1, .. })
        ));
    }

    #[test]
    fn missing_field_reports_line() {
        let content = "{\"context\":[{\"role\":0,\"text\":\"hi\"}]}\n";
        assert!(matches!(
            parse_jsonl(content),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn turn_ids_count_backward_from_response() {
        let vocab = test_vocab();
        let s = sample(&[(0, "hello there"), (1, "how are you"), (0, "do you like cats")], "yes");
        let (batch, warnings) = build_batch(&[s], &vocab, 64, 16, 16).unwrap();
        assert!(warnings.is_empty());
        let turns: Vec<u32> = batch
            .ctx_turns
            .iter()
            .zip(&batch.ctx_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        // oldest turn -> 3, most recent -> 1, in blocks
        assert_eq!(turns.first(), Some(&3));
        assert_eq!(turns.last(), Some(&1));
        let mut sorted = turns.clone();
        sorted.dedup();
        assert_eq!(sorted, vec![3, 2, 1]);
    }

    #[test]
    fn single_turn_ids_and_roles() {
        let vocab = test_vocab();
        let s = sample(&[(0, "hi")], "hello");
        let (batch, _) = build_batch(&[s], &vocab, 64, 16, 16).unwrap();
        for j in 0..batch.ctx_len {
            if batch.ctx_mask[j] {
                assert_eq!(batch.ctx_turns[j], 1);
                assert_eq!(batch.ctx_roles[j], 0);
            }
        }
        assert_eq!(batch.post_input[0], LATENT_ID);
        assert_eq!(batch.resp_input[0], BOS_ID);
    }

    #[test]
    fn truncation_drops_oldest_and_preserves_alternation() {
        let vocab = test_vocab();
        let s = sample(
            &[
                (0, "hello there hello there hello there"),
                (1, "how are you how are you"),
                (0, "do you like cats"),
            ],
            "yes",
        );
        let full_len: usize = s
            .context
            .iter()
            .map(|t| vocab.encode(&t.text).len() + 1)
            .sum();
        let keep = full_len - (vocab.encode("hello there hello there hello there").len() + 1);
        let (batch, _) = build_batch(&[s.clone()], &vocab, keep, 16, 16).unwrap();
        let kept: usize = batch.ctx_mask.iter().filter(|&&m| m).count();
        assert_eq!(kept, keep);
        // retained suffix must start at the second turn (turn distance 2)
        assert_eq!(batch.ctx_turns[0], 2);
        let roles: Vec<u32> = batch
            .ctx_roles
            .iter()
            .zip(&batch.ctx_mask)
            .filter(|(_, &m)| m)
            .map(|(&r, _)| r)
            .collect();
        let mut deduped = roles.clone();
        deduped.dedup();
        assert_eq!(deduped, vec![1, 0]);
    }

    #[test]
    fn overlong_response_skipped_with_warning() {
        let vocab = test_vocab();
        let ok = sample(&[(0, "hi")], "yes");
        let long = sample(&[(0, "hi")], "hello there how are you do you like calm cats yes i do");
        let (batch, warnings) = build_batch(&[ok, long], &vocab, 64, 3, 16).unwrap();
        assert_eq!(batch.batch, 1);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].sample_index, 1);
    }

    #[test]
    fn position_ids_and_mask_pad_agreement() {
        let vocab = test_vocab();
        let samples = vec![
            sample(&[(0, "hello there how are you")], "yes"),
            sample(&[(0, "hi")], "hello"),
        ];
        let (batch, _) = build_batch(&samples, &vocab, 64, 16, 16).unwrap();
        for r in 0..batch.batch {
            for j in 0..batch.ctx_len {
                let at = r * batch.ctx_len + j;
                if batch.ctx_mask[at] {
                    assert_eq!(batch.ctx_pos[at], j as u32);
                    assert_ne!(batch.ctx_tokens[at], PAD_ID);
                } else {
                    assert_eq!(batch.ctx_tokens[at], PAD_ID);
                }
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_counted() {
        let (s1, o1) = generate_synthetic(7, 100, 8).unwrap();
        let (s2, o2) = generate_synthetic(7, 100, 8).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(o1.entries.len(), o2.entries.len());
        assert_eq!(s1.len(), 100);
        let total: usize = o1.entries.values().map(|e| e.responses.len()).sum();
        assert_eq!(total, 800);
    }

    #[test]
    fn synthetic_training_responses_are_oracle_members() {
        let (samples, oracle) = generate_synthetic(11, 40, 6).unwrap();
        for s in &samples {
            assert!(oracle.is_valid(&s.context, &s.response).unwrap());
        }
        assert!(!oracle.is_valid(&samples[0].context, "complete nonsense").unwrap());
    }

    #[test]
    fn synthetic_k_valid_minimum() {
        assert!(generate_synthetic(1, 10, 3).is_err());
        let (_, oracle) = generate_synthetic(1, 10, 4).unwrap();
        assert!(oracle.entries.values().all(|e| e.responses.len() >= 4));
    }

    #[test]
    fn oracle_round_trips_through_sidecar_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.jsonl");
        let (samples, oracle) = generate_synthetic(3, 12, 5).unwrap();
        oracle.save(&path).unwrap();
        let loaded = SyntheticOracle::load(&path).unwrap();
        for s in &samples {
            assert!(loaded.is_valid(&s.context, &s.response).unwrap());
        }
        let missing = vec![Turn {
            role: 0,
            text: "unknown context".into(),
        }];
        assert!(matches!(
            loaded.is_valid(&missing, "x"),
            Err(CorpusError::MissingOracleEntry(_))
        ));
    }
}
