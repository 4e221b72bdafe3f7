//! Closed whitespace vocabulary and tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOT: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eot>", "<unk>"];

pub const OBJECTS: [&str; 24] = [
    "car", "ball", "cup", "tree", "dog", "cat", "bird", "chair", "table", "lamp", "book", "clock",
    "boat", "house", "flower", "kite", "shoe", "hat", "bag", "bottle", "bench", "box", "door",
    "window",
];

pub const COLORS: [&str; 12] = [
    "red", "blue", "green", "yellow", "orange", "purple", "pink", "brown", "black", "white",
    "gray", "teal",
];

/// Named regions on a 3×3 layout, row-major.
pub const POSITIONS: [&str; 9] = [
    "top-left",
    "top",
    "top-right",
    "left",
    "center",
    "right",
    "bottom-left",
    "bottom",
    "bottom-right",
];

const FUNCTION_WORDS: [&str; 18] = [
    "the", "image", "shows", "a", "located", "at", "and", ",", ".", "photo", "of", "picture",
    "with", "there", "is", "in", "this", "an",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Token ids beginning with BOS and ending with exactly one EOT.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Count including BOS and EOT.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Slot of the EOT token.
    pub fn eot_position(&self) -> usize {
        self.ids.len() - 1
    }
}

impl Vocabulary {
    /// The generator's closed vocabulary: reserved ids, function words, objects,
    /// colors, positions.
    pub fn standard() -> Self {
        let words = FUNCTION_WORDS
            .iter()
            .chain(OBJECTS.iter())
            .chain(COLORS.iter())
            .chain(POSITIONS.iter());
        Self::from_words(words.copied()).expect("standard word lists are duplicate-free")
    }

    /// Builds a vocabulary from non-reserved words; ids start after the reserved block.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            ensure!(
                !w.is_empty() && !w.chars().any(char::is_whitespace),
                "token {w:?} is empty or contains whitespace"
            );
            ensure!(!index.contains_key(w), "duplicate token {w:?}");
            index.insert(w.to_string(), tokens.len() as u32);
            tokens.push(w.to_string());
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line; line number (0-based) is the id, reserved block first.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, expected) in RESERVED.iter().enumerate() {
            match lines.get(i) {
                Some(l) if l == expected => {}
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected reserved token {expected}, found {other:?}"),
                    })
                }
            }
        }
        Self::from_words(lines[RESERVED.len()..].iter().copied()).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })
    }

    /// Whitespace tokenization into `BOS tokens… EOT`, truncated to `max_len` ids.
    ///
    /// Over-long input keeps its first `max_len − 2` tokens; EOT is always
    /// present. Unknown words map to UNK.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        ensure!(max_len >= 3, "max_len must be at least 3, got {max_len}");
        let mut ids = Vec::with_capacity(max_len.min(128));
        ids.push(BOS);
        for word in text.split_whitespace().take(max_len - 2) {
            let id = self.id(word).unwrap_or_else(|| {
                log::debug!("unknown token {word:?} mapped to UNK");
                UNK
            });
            ids.push(id);
        }
        ids.push(EOT);
        Ok(TokenSequence { ids })
    }

    /// Number of whitespace tokens in `text` (before BOS/EOT are added).
    pub fn word_count(text: &str) -> usize {
        text.split_whitespace().count()
    }
}
