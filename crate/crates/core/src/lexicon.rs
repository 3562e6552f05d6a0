//! Homophone confusion pairs used by refinement prompts and error analysis.

use serde::{Deserialize, Serialize};

use crate::codec::{self, ParseError};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    /// What the recognizer tends to output.
    pub wrong: String,
    /// What was actually said in class.
    pub right: String,
    pub gloss_wrong: String,
    pub gloss_right: String,
    pub pinyin: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HomophoneLexicon {
    pub entries: Vec<LexiconEntry>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LexiconError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("lexicon entry {index}: {reason}")]
    InvalidEntry { index: usize, reason: String },
}

impl HomophoneLexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self, LexiconError> {
        let entries: Vec<LexiconEntry> = entries
            .into_iter()
            .map(|e| LexiconEntry {
                wrong: text::nfc(e.wrong.trim()),
                right: text::nfc(e.right.trim()),
                gloss_wrong: e.gloss_wrong,
                gloss_right: e.gloss_right,
                pinyin: e.pinyin,
            })
            .collect();
        for (index, e) in entries.iter().enumerate() {
            let reason = if e.wrong.is_empty() || e.right.is_empty() {
                Some("wrong and right must be non-empty")
            } else if e.wrong == e.right {
                Some("wrong and right must differ")
            } else if e.pinyin.trim().is_empty() {
                Some("pinyin must be non-empty")
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(LexiconError::InvalidEntry { index, reason: reason.into() });
            }
        }
        Ok(HomophoneLexicon { entries })
    }

    pub fn load(bytes: &[u8]) -> Result<Self, LexiconError> {
        let entries: Vec<LexiconEntry> = codec::parse(bytes)?;
        Self::new(entries)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every ordered (reference word, hypothesis word) pair that sounds alike:
    /// same toneless pinyin and same length in characters.
    pub fn confusable_pairs(&self) -> Vec<(Vec<char>, Vec<char>)> {
        let mut words: Vec<(Vec<char>, String)> = Vec::new();
        for e in &self.entries {
            let key = text::pinyin_key(&e.pinyin);
            for w in [&e.wrong, &e.right] {
                let chars: Vec<char> = w.chars().collect();
                if !words.iter().any(|(c, k)| *c == chars && *k == key) {
                    words.push((chars, key.clone()));
                }
            }
        }
        let mut pairs = Vec::new();
        for (a, ka) in &words {
            for (b, kb) in &words {
                if a != b && ka == kb && a.len() == b.len() {
                    pairs.push((a.clone(), b.clone()));
                }
            }
        }
        pairs
    }
}
