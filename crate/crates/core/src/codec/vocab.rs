use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
/// Decoder start token.
pub const BOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const SENTINEL_BASE: usize = 5;
/// Number of distinct sentinel tokens `<M1>..<M16>`.
pub const SENTINEL_COUNT: usize = 16;
pub const FIRST_WORD: usize = SENTINEL_BASE + SENTINEL_COUNT;

pub const SEP_TEXT: &str = "<sep>";
pub const NONE_VALUE: &str = "None";

/// Words the codec itself emits, always present in a vocabulary.
const CODEC_WORDS: [&str; 5] = [":", ".", "=", ";", NONE_VALUE];

pub fn sentinel_text(i: usize) -> String {
    format!("<M{i}>")
}

/// 1-based sentinel index of `id`, if it is a sentinel.
pub fn sentinel_index(id: usize) -> Option<usize> {
    (SENTINEL_BASE..SENTINEL_BASE + SENTINEL_COUNT)
        .contains(&id)
        .then(|| id - SENTINEL_BASE + 1)
}

pub fn sentinel_id(i: usize) -> usize {
    assert!((1..=SENTINEL_COUNT).contains(&i), "sentinel {i} out of range");
    SENTINEL_BASE + i - 1
}

/// Closed whitespace word-level vocabulary with a fixed reserved prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved tokens, then the codec words, then every distinct
    /// whitespace-separated word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "</s>".into(), "<s>".into(), "<unk>".into(), SEP_TEXT.into()];
        tokens.extend((1..=SENTINEL_COUNT).map(sentinel_text));
        let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut words: BTreeSet<String> = CODEC_WORDS.iter().map(|s| s.to_string()).collect();
        for t in texts {
            words.extend(t.split_whitespace().map(str::to_string));
        }
        tokens.extend(words.into_iter().filter(|w| !reserved.contains(w)));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Encodes a decoder target and appends the end token.
    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Joins tokens with single spaces, dropping pad/start/end markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn count_unknown(&self, text: &str) -> usize {
        text.split_whitespace().filter(|w| self.id(w).is_none()).count()
    }
}
