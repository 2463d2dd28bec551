//! Word-level tokenization and vocabulary.
//!
//! Text is lowercased and split on whitespace; every punctuation character
//! becomes its own token. Category names, label words and template words are
//! therefore single tokens whenever they are plain words.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, LabelSchema};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;
pub const CLS: u32 = 5;
pub const MASK: u32 = 6;

/// Surface forms of the reserved tokens, indexed by id.
pub const SPECIAL_TOKENS: [&str; 7] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>", "<cls>", "<mask>"];
const SPECIAL_NAMES: [&str; 7] = ["pad", "bos", "eos", "unk", "sep", "cls", "mask"];

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercase and split into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_punct(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// True if `word` survives tokenization as exactly one token equal to itself.
pub fn is_single_token(word: &str) -> bool {
    let toks = tokenize(word);
    toks.len() == 1 && toks[0] == word
}

/// A sequence of vocabulary ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from token counts. Ordinary tokens are ordered by count
    /// descending, then lexicographically; `extra` words are added with
    /// count zero if absent.
    pub fn from_counts<'a>(
        counts: &HashMap<String, usize>,
        extra: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut all: HashMap<&str, usize> = counts.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        for w in extra {
            all.entry(w).or_insert(0);
        }
        let mut ordinary: Vec<(&str, usize)> = all
            .into_iter()
            .filter(|(w, _)| !SPECIAL_TOKENS.contains(w))
            .collect();
        ordinary.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ordinary.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("specials are fixed")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Schema(format!(
                "vocabulary needs at least {} entries, got {}",
                SPECIAL_TOKENS.len() + 1,
                tokens.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Schema(format!(
                    "special token {} must be {:?} at id {i}",
                    SPECIAL_NAMES[i], s
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encode already-tokenized words; out-of-vocabulary words map to UNK.
    pub fn encode_tokens<S: AsRef<str>>(&self, words: &[S]) -> TokenSeq {
        TokenSeq(
            words
                .iter()
                .map(|w| {
                    let w = w.as_ref();
                    match self.index.get(w) {
                        Some(&id) if id as usize >= SPECIAL_TOKENS.len() => id,
                        _ => UNK,
                    }
                })
                .collect(),
        )
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        self.encode_tokens(&tokenize(text))
    }

    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        let mut words = Vec::with_capacity(seq.len());
        for &id in seq.ids() {
            let tok = self.token(id).ok_or_else(|| {
                Error::ModelInput(format!("token id {id} out of range for vocabulary of {}", self.len()))
            })?;
            words.push(tok);
        }
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let specials = SPECIAL_TOKENS
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i as u32))
            .collect();
        serde_json::to_value(VocabFile {
            specials,
            tokens: self.tokens.clone(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_value(value).map_err(|e| Error::Schema(format!("vocabulary: {e}")))?;
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if file.specials.get(*s) != Some(&(i as u32)) {
                return Err(Error::Schema(format!(
                    "vocabulary specials block must map {s:?} to {i}"
                )));
            }
        }
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(&self.to_json()).expect("vocab serializes");
        crate::io::write_atomic(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value = serde_json::from_str(&raw).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_json(value)
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocab({} tokens)", self.len())
    }
}

/// Vocabulary over every corpus token plus all schema and template words.
pub fn build_vocab(splits: &[&DatasetSplit], schema: &LabelSchema) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for split in splits {
        for ex in &split.examples {
            for t in &ex.tokens {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
    }
    Vocab::from_counts(&counts, schema.words().iter().map(String::as_str))
}
