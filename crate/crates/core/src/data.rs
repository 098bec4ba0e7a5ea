//! Corpus ingestion, vocabulary construction, and batching for intent+slot
//! data.
//!
//! Two file formats are supported, byte-exact:
//!
//! * `conll`: utterances separated by blank lines. The first line of a block
//!   is `# intent: <label>`; each remaining line is `<token>\t<tag>`.
//! * `jsonl`: one JSON object per line with keys `tokens`, `slots`, `intent`.
//!
//! Tokens are lowercased on load. Vocabularies are built from the training
//! split only, with frequency-then-lexicographic id assignment so two loads
//! of the same corpus always agree.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown corpus format `{0}` (expected conll or jsonl)")]
    UnknownFormat(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// One tokenized utterance with aligned IOB slot tags and an intent label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    #[serde(rename = "slots")]
    pub slot_tags: Vec<String>,
    pub intent: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Conll,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "conll" => Ok(CorpusFormat::Conll),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusFormat::Conll => write!(f, "conll"),
            CorpusFormat::Jsonl => write!(f, "jsonl"),
        }
    }
}

const INTENT_PREFIX: &str = "# intent: ";

/// Load a corpus file. Tokens are lowercased; tags and intents are kept
/// verbatim.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Utterance>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        CorpusFormat::Conll => parse_conll(&text),
        CorpusFormat::Jsonl => parse_jsonl(&text),
    }
}

/// Infer the format from the file extension (`.jsonl` or anything else as
/// conll).
pub fn format_for_path(path: &Path) -> CorpusFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
        _ => CorpusFormat::Conll,
    }
}

pub fn parse_conll(text: &str) -> Result<Vec<Utterance>, DataError> {
    let mut utterances = Vec::new();
    let mut intent: Option<(String, usize)> = None;
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();

    let mut flush = |intent: &mut Option<(String, usize)>,
                     tokens: &mut Vec<String>,
                     tags: &mut Vec<String>|
     -> Result<(), DataError> {
        match intent.take() {
            None => {
                debug_assert!(tokens.is_empty());
                Ok(())
            }
            Some((label, start_line)) => {
                if tokens.is_empty() {
                    return Err(DataError::Parse {
                        line: start_line,
                        message: format!("utterance block with intent `{label}` has no tokens"),
                    });
                }
                utterances.push(Utterance {
                    tokens: std::mem::take(tokens),
                    slot_tags: std::mem::take(tags),
                    intent: label,
                });
                Ok(())
            }
        }
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut intent, &mut tokens, &mut tags)?;
            continue;
        }
        if let Some(label) = line.strip_prefix(INTENT_PREFIX) {
            if intent.is_some() {
                flush(&mut intent, &mut tokens, &mut tags)?;
            }
            let label = label.trim();
            if label.is_empty() {
                return Err(DataError::Parse {
                    line: line_no,
                    message: "empty intent label".into(),
                });
            }
            intent = Some((label.to_string(), line_no));
            continue;
        }
        if intent.is_none() {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("token line before any `{INTENT_PREFIX}` header"),
            });
        }
        let mut fields = line.split('\t');
        let token = fields.next().unwrap_or("");
        let tag = fields.next();
        match tag {
            Some(tag) if !token.is_empty() && !tag.is_empty() && fields.next().is_none() => {
                tokens.push(token.to_lowercase());
                tags.push(tag.to_string());
            }
            _ => {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("expected `<token>\\t<tag>`, got `{line}`"),
                });
            }
        }
    }
    flush(&mut intent, &mut tokens, &mut tags)?;
    if utterances.is_empty() {
        return Err(DataError::Contract("corpus contains no utterances".into()));
    }
    Ok(utterances)
}

pub fn write_conll(utterances: &[Utterance]) -> String {
    let mut out = String::new();
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(INTENT_PREFIX);
        out.push_str(&u.intent);
        out.push('\n');
        for (tok, tag) in u.tokens.iter().zip(&u.slot_tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Utterance>, DataError> {
    let mut utterances = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut u: Utterance = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if u.tokens.len() != u.slot_tags.len() || u.tokens.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                message: format!(
                    "{} tokens vs {} slot tags",
                    u.tokens.len(),
                    u.slot_tags.len()
                ),
            });
        }
        for t in &mut u.tokens {
            *t = t.to_lowercase();
        }
        utterances.push(u);
    }
    if utterances.is_empty() {
        return Err(DataError::Contract("corpus contains no utterances".into()));
    }
    Ok(utterances)
}

pub fn write_jsonl(utterances: &[Utterance]) -> String {
    let mut out = String::new();
    for u in utterances {
        out.push_str(&serde_json::to_string(u).expect("utterance serializes"));
        out.push('\n');
    }
    out
}

pub const PAD_WORD: usize = 0;
pub const UNK_WORD: usize = 1;
pub const PAD_TAG: usize = 0;
pub const BOS_TAG: usize = 1;

pub const PAD_WORD_STR: &str = "<pad>";
pub const UNK_WORD_STR: &str = "<unk>";
pub const PAD_TAG_STR: &str = "<pad>";
pub const BOS_TAG_STR: &str = "<bos>";

/// Token/tag/intent id maps. Ids 0 and 1 of the word table are PAD and UNK;
/// ids 0 and 1 of the tag table are PAD and BOS. Corpus symbols never alias
/// the reserved rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    slot_labels: Vec<String>,
    slot_ids: HashMap<String, usize>,
    intents: Vec<String>,
    intent_ids: HashMap<String, usize>,
    pub normalize_digits: bool,
}

fn ranked_symbols(counts: HashMap<String, usize>, min_freq: usize) -> Vec<String> {
    let mut items: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.into_iter().map(|(s, _)| s).collect()
}

/// Build the three id maps from the training split. Words occurring fewer
/// than `min_freq` times map to UNK.
pub fn build_vocab(
    train: &[Utterance],
    min_freq: usize,
    normalize_digits: bool,
) -> Result<Vocabulary, DataError> {
    if train.is_empty() {
        return Err(DataError::Contract(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    let mut tag_counts: HashMap<String, usize> = HashMap::new();
    let mut intent_counts: HashMap<String, usize> = HashMap::new();
    for u in train {
        for tok in &u.tokens {
            *word_counts
                .entry(normalize_token(tok, normalize_digits))
                .or_default() += 1;
        }
        for tag in &u.slot_tags {
            *tag_counts.entry(tag.clone()).or_default() += 1;
        }
        *intent_counts.entry(u.intent.clone()).or_default() += 1;
    }

    let mut words = vec![PAD_WORD_STR.to_string(), UNK_WORD_STR.to_string()];
    words.extend(ranked_symbols(word_counts, min_freq));
    let mut slot_labels = vec![PAD_TAG_STR.to_string(), BOS_TAG_STR.to_string()];
    slot_labels.extend(ranked_symbols(tag_counts, 1));
    let intents = ranked_symbols(intent_counts, 1);

    let index = |v: &[String]| -> HashMap<String, usize> {
        v.iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect()
    };
    Ok(Vocabulary {
        word_ids: index(&words),
        words,
        slot_ids: index(&slot_labels),
        slot_labels,
        intent_ids: index(&intents),
        intents,
        normalize_digits,
    })
}

fn normalize_token(token: &str, normalize_digits: bool) -> String {
    let lower = token.to_lowercase();
    if normalize_digits {
        lower
            .chars()
            .map(|c| if c.is_ascii_digit() { '0' } else { c })
            .collect()
    } else {
        lower
    }
}

impl Vocabulary {
    /// Total word rows including PAD and UNK.
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    /// Total tag rows including PAD and BOS.
    pub fn num_slot_rows(&self) -> usize {
        self.slot_labels.len()
    }

    /// Corpus slot labels, excluding the reserved rows.
    pub fn num_slot_labels(&self) -> usize {
        self.slot_labels.len() - 2
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    /// Id for a raw token; unknown words map to UNK.
    pub fn word_id(&self, token: &str) -> usize {
        let norm = normalize_token(token, self.normalize_digits);
        self.word_ids.get(&norm).copied().unwrap_or(UNK_WORD)
    }

    pub fn slot_id(&self, tag: &str) -> Option<usize> {
        self.slot_ids.get(tag).copied()
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intent_ids.get(intent).copied()
    }

    pub fn word_str(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Tag string for a predicted id; the reserved rows decode to `O` so a
    /// degenerate prediction still yields a well-formed tag sequence.
    pub fn slot_str(&self, id: usize) -> &str {
        if id < 2 {
            "O"
        } else {
            &self.slot_labels[id]
        }
    }

    pub fn intent_str(&self, id: usize) -> &str {
        &self.intents[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn slot_labels(&self) -> &[String] {
        &self.slot_labels
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    /// Rebuild from serialized symbol lists (checkpoint loading). The lists
    /// must include the reserved rows in positions 0 and 1.
    pub fn from_parts(
        words: Vec<String>,
        slot_labels: Vec<String>,
        intents: Vec<String>,
        normalize_digits: bool,
    ) -> Self {
        let index = |v: &[String]| -> HashMap<String, usize> {
            v.iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i))
                .collect()
        };
        Vocabulary {
            word_ids: index(&words),
            words,
            slot_ids: index(&slot_labels),
            slot_labels,
            intent_ids: index(&intents),
            intents,
            normalize_digits,
        }
    }
}

/// Integer-encoded, padded minibatch in `[step][element]` layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub word_ids: Vec<Vec<usize>>,
    pub tag_ids: Vec<Vec<usize>>,
    pub intent_ids: Vec<usize>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    /// Positions of the batch elements in the source corpus.
    pub indices: Vec<usize>,
    /// Gold tags or intents that were missing from the vocabulary (test-time
    /// symbols); they encode as PAD/0 and are scored as errors downstream.
    pub unknown_gold_symbols: usize,
}

impl Batch {
    pub fn seq_len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    fn encode(data: &[Utterance], indices: Vec<usize>, vocab: &Vocabulary) -> Batch {
        let lengths: Vec<usize> = indices.iter().map(|&i| data[i].tokens.len()).collect();
        let seq_len = *lengths.iter().max().expect("nonempty batch");
        let batch = indices.len();
        let mut word_ids = vec![vec![PAD_WORD; batch]; seq_len];
        let mut tag_ids = vec![vec![PAD_TAG; batch]; seq_len];
        let mut mask = vec![vec![false; batch]; seq_len];
        let mut intent_ids = vec![0usize; batch];
        let mut unknown = 0usize;
        for (b, &i) in indices.iter().enumerate() {
            let u = &data[i];
            for (t, (tok, tag)) in u.tokens.iter().zip(&u.slot_tags).enumerate() {
                word_ids[t][b] = vocab.word_id(tok);
                tag_ids[t][b] = match vocab.slot_id(tag) {
                    Some(id) => id,
                    None => {
                        unknown += 1;
                        PAD_TAG
                    }
                };
                mask[t][b] = true;
            }
            intent_ids[b] = match vocab.intent_id(&u.intent) {
                Some(id) => id,
                None => {
                    unknown += 1;
                    0
                }
            };
        }
        Batch {
            word_ids,
            tag_ids,
            intent_ids,
            mask,
            lengths,
            indices,
            unknown_gold_symbols: unknown,
        }
    }
}

/// Bucket utterances by length, pad per batch, and encode. With a shuffle
/// seed the utterance order and the batch order are both permuted,
/// deterministically; without one, batches follow corpus order within each
/// length bucket.
pub fn batches(
    data: &[Utterance],
    vocab: &Vocabulary,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    if data.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    if let Some(rng) = rng.as_mut() {
        order.shuffle(rng);
    }
    // Stable sort keeps the (possibly shuffled) order within a length group.
    order.sort_by_key(|&i| data[i].tokens.len());

    let mut groups: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    if let Some(rng) = rng.as_mut() {
        groups.shuffle(rng);
    }
    groups
        .into_iter()
        .map(|indices| Batch::encode(data, indices, vocab))
        .collect()
}

/// Canonical ATIS split sizes and label counts. Returns human-readable
/// warnings when a loaded split deviates; deviation is not an error.
pub fn atis_split_warnings(
    train_utts: usize,
    test_utts: usize,
    vocab: &Vocabulary,
) -> Vec<String> {
    let mut warnings = Vec::new();
    if train_utts != 4978 {
        warnings.push(format!(
            "training split has {train_utts} utterances; the canonical ATIS split has 4978"
        ));
    }
    if test_utts != 893 {
        warnings.push(format!(
            "test split has {test_utts} utterances; the canonical ATIS split has 893"
        ));
    }
    if vocab.num_intents() != 18 {
        warnings.push(format!(
            "vocabulary has {} intent classes; the canonical ATIS split has 18",
            vocab.num_intents()
        ));
    }
    if vocab.num_slot_labels() != 127 {
        warnings.push(format!(
            "vocabulary has {} slot labels; the canonical ATIS split has 127",
            vocab.num_slot_labels()
        ));
    }
    warnings
}
