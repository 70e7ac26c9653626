use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Separates an instruction query from its response.
pub const SEP: usize = 4;
const N_SPECIAL: usize = 5;

/// Glyphs always present in the vocabulary so retrieval calls and
/// reference blocks can be emitted by any model, whatever its corpus.
const RESERVED_GLYPHS: &str = "RETIVFNC(;=)…#- \n";

/// Token ids for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// True when at least one character fell outside the vocabulary.
    pub lossy: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Character-level tokenizer with five reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Tokenizer {
    /// Vocabulary = sorted distinct characters of `texts` plus reserved glyphs.
    pub fn from_corpus<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut set: BTreeSet<char> = RESERVED_GLYPHS.chars().collect();
        for t in texts {
            set.extend(t.chars());
        }
        Self::from_chars(set.into_iter().collect())
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + N_SPECIAL))
            .collect();
        Self { chars, index }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + N_SPECIAL
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.is_empty() {
            return Err(Error::data("cannot tokenize empty text"));
        }
        Ok(self.encode_chars(text))
    }

    /// Like [`tokenize`](Self::tokenize) but accepts empty text.
    pub fn encode_chars(&self, text: &str) -> TokenSequence {
        let mut lossy = false;
        let ids = text
            .chars()
            .map(|c| {
                self.id_of(c).unwrap_or_else(|| {
                    lossy = true;
                    UNK
                })
            })
            .collect();
        TokenSequence { ids, lossy }
    }

    /// Special ids render as nothing, except UNK which renders as U+FFFD.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                UNK => Some('\u{FFFD}'),
                id if id < N_SPECIAL => None,
                id => self.chars.get(id - N_SPECIAL).copied(),
            })
            .collect()
    }

    /// `[BOS] query [SEP] response [EOS]`
    pub fn encode_instruction(&self, query: &str, response: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(query.len() + response.len() + 3);
        ids.push(BOS);
        ids.extend(self.encode_chars(query).ids);
        ids.push(SEP);
        ids.extend(self.encode_chars(response).ids);
        ids.push(EOS);
        ids
    }

    /// `[BOS] query [SEP]`, the prompt that precedes a response.
    pub fn encode_query_prompt(&self, query: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_chars(query).ids);
        ids.push(SEP);
        ids
    }

    /// `[BOS] text [EOS]`
    pub fn encode_document(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_chars(text).ids);
        ids.push(EOS);
        ids
    }
}
