use std::collections::{BTreeSet, HashMap};

use crate::error::{FastError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

const RESERVED: [&str; 3] = [PAD, UNK, MASK];

/// Lowercased whitespace tokenizer with a sorted, corpus-derived vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases every word except the reserved bracket tokens.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(normalize_word)
}

fn normalize_word(w: &str) -> String {
    match RESERVED.iter().find(|r| r.eq_ignore_ascii_case(w)) {
        Some(r) => r.to_string(),
        None => w.to_lowercase(),
    }
}

impl Tokenizer {
    /// Vocabulary is the reserved tokens followed by every distinct word in sorted order,
    /// so the result does not depend on the order of `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for w in split_words(t) {
                if !RESERVED.contains(&w.as_str()) {
                    set.insert(w);
                }
            }
        }
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect::<Vec<_>>();
        Self::from_words_unchecked(words)
    }

    /// Rebuilds a tokenizer from a stored word table.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..3] != RESERVED {
            return Err(FastError::Validation(
                "word table must start with [PAD], [UNK], [MASK]".into(),
            ));
        }
        let tok = Self::from_words_unchecked(words);
        if tok.index.len() != tok.words.len() {
            return Err(FastError::Validation("duplicate words in table".into()));
        }
        Ok(tok)
    }

    fn from_words_unchecked(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        let w = normalize_word(word);
        self.index
            .get(&w)
            .copied()
            .ok_or(FastError::Vocab(w))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        split_words(text).map(|w| self.id(&w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.word(i)
                    .ok_or_else(|| FastError::Vocab(format!("#{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let t = Tokenizer::build(["man is good at math"]);
        assert_eq!(t.id(PAD).unwrap(), PAD_ID);
        assert_eq!(t.id(UNK).unwrap(), UNK_ID);
        assert_eq!(t.id(MASK).unwrap(), MASK_ID);
        assert_eq!(t.len(), 3 + 5);
    }

    #[test]
    fn order_independent() {
        let a = Tokenizer::build(["b a", "c"]);
        let b = Tokenizer::build(["c", "a b"]);
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_word_is_vocab_error() {
        let t = Tokenizer::build(["man"]);
        assert!(matches!(t.encode("woman"), Err(FastError::Vocab(w)) if w == "woman"));
    }

    #[test]
    fn from_words_checks_reserved_prefix() {
        assert!(Tokenizer::from_words(vec!["a".into()]).is_err());
        let t = Tokenizer::build(["x y"]);
        assert_eq!(Tokenizer::from_words(t.words().to_vec()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in prop::collection::vec("[a-z]{1,6}", 1..10)) {
            let text = words.join(" ");
            let t = Tokenizer::build([text.as_str()]);
            let ids = t.encode(&text).unwrap();
            prop_assert_eq!(t.decode(&ids).unwrap(), text);
        }
    }
}
