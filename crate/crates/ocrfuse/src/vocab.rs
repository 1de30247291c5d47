//! Fixed answer vocabulary with reserved special tokens.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const BEGIN: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BEGIN_TOKEN: &str = "<begin>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word list with specials at indices 0–3 and an O(1) reverse index.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from content words; specials are prepended.
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(content: I) -> Self {
        let mut words: Vec<String> = vec![
            PAD_TOKEN.to_string(),
            BEGIN_TOKEN.to_string(),
            END_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        for w in content {
            words.push(w.into());
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}
