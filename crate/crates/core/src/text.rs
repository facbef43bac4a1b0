//! Text normalisation, the character-level vocabulary shared by the encoder
//! and decoder, and the word/character tokenizer used by the metrics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
/// End of a generated response.
pub const EOS: usize = 5;
/// Start of the knowledge segment in decoder inputs.
pub const KB: usize = 6;
pub const PATIENT: usize = 7;
pub const DOCTOR: usize = 8;

pub const RESERVED: [&str; 9] = [
    "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[EOS]", "[KB]", "[PAT]", "[DOC]",
];

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("vocabulary io: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file must start with the reserved tokens; line {line} is {found:?}")]
    Reserved { line: usize, found: String },
    #[error("duplicate token {0:?}")]
    Duplicate(String),
}

/// Collapses whitespace runs to a single space and trims both ends.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits text into model tokens.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// One token per Unicode scalar of the normalised text.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharTokenizer;

impl Tokenizer for CharTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        normalize(text).chars().map(String::from).collect()
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F
        | 0x3000..=0x303F | 0xFF00..=0xFFEF)
}

/// Tokens used by every metric: whitespace-separated words, with each CJK
/// character (and full-width punctuation) standing alone.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut run = String::new();
        for c in word.chars() {
            if is_cjk(c) {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

/// Dense token ↔ id map with the reserved tokens at fixed ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Builds a character vocabulary from `texts`, ordered by descending
    /// frequency then by character.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in CharTokenizer.tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::reserved_only();
        for (tok, _) in entries {
            vocab.push(tok);
        }
        vocab
    }

    fn push(&mut self, token: String) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn encode_with(&self, tokenizer: &dyn Tokenizer, text: &str) -> Vec<usize> {
        tokenizer
            .tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Character-level encoding of normalised `text`; unknown characters map
    /// to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_with(&CharTokenizer, text)
    }

    /// Concatenates non-reserved tokens; reserved ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_reserved(i))
            .filter_map(|&i| self.token(i))
            .collect()
    }

    /// Writes one token per line; line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let body = fs::read_to_string(path)?;
        Self::parse(&body)
    }

    pub fn parse(body: &str) -> Result<Self, VocabError> {
        let lines: Vec<&str> = body.strip_suffix('\n').unwrap_or(body).split('\n').collect();
        for (i, expected) in RESERVED.iter().enumerate() {
            let found = lines.get(i).copied().unwrap_or("");
            if found != *expected {
                return Err(VocabError::Reserved {
                    line: i,
                    found: found.to_string(),
                });
            }
        }
        let mut vocab = Self::reserved_only();
        for line in &lines[RESERVED.len()..] {
            if vocab.index.contains_key(*line) {
                return Err(VocabError::Duplicate(line.to_string()));
            }
            vocab.push(line.to_string());
        }
        Ok(vocab)
    }

    /// Ids of ordinary (non-reserved) tokens, used for random replacement
    /// during masking.
    pub fn ordinary_range(&self) -> std::ops::Range<usize> {
        RESERVED.len()..self.tokens.len()
    }
}
