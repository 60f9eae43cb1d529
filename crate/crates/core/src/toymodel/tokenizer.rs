//! Word-level tokenizer over a closed vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Token emitted for a line break.
pub const NEWLINE: &str = "\n";

/// Whitespace tokenizer: lowercases, splits lines on whitespace and emits
/// [`NEWLINE`] between lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    pub fn new(vocab: Vec<String>) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::ModelConfig("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::ModelConfig("empty vocabulary entry".into()));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::ModelConfig(format!(
                    "duplicate vocabulary entry {w:?}"
                )));
            }
        }
        Ok(Tokenizer { vocab, index })
    }

    /// Split text into normalized words, with [`NEWLINE`] markers between lines.
    pub fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                out.push(NEWLINE.to_string());
            }
            out.extend(line.split_whitespace().map(str::to_lowercase));
        }
        out
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        Self::words(text).into_iter().map(|w| self.id(&w)).collect()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id).unwrap_or("<unk>");
            if w == NEWLINE {
                out.push('\n');
            } else {
                if !out.is_empty() && !out.ends_with('\n') {
                    out.push(' ');
                }
                out.push_str(w);
            }
        }
        out
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        let v = ["\n", "paris", "is", "in", "france", "san", "pedro"];
        Tokenizer::new(v.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn encodes_words_and_newlines() {
        let t = tok();
        assert_eq!(t.encode("Paris is in France").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(t.encode("paris\nsan  pedro").unwrap(), vec![1, 0, 5, 6]);
        assert_eq!(t.decode(&[1, 2, 0, 5, 6]), "paris is\nsan pedro");
    }

    #[test]
    fn unknown_and_duplicate_words() {
        assert!(matches!(tok().encode("tokyo"), Err(Error::UnknownToken(_))));
        assert!(Tokenizer::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Tokenizer::new(vec![]).is_err());
    }
}
