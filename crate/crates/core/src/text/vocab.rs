use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::mask::MASK;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Lowercased token vocabulary. Ids 0..4 are reserved for the mask symbol,
/// unknown, begin and end markers; corpus words follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const MASK_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;

    /// Builds from token lists, keeping words seen at least `min_freq` times.
    pub fn build<I, S>(corpus: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = Vec<S>>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for sent in corpus {
            for t in sent {
                *counts.entry(t.as_ref().to_lowercase()).or_insert(0) += 1;
            }
        }
        let specials = [MASK, UNK, BOS, EOS];
        let mut tokens: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            counts.into_iter().filter(|(w, c)| *c >= min_freq.max(1) && !specials.contains(&w.as_str())).map(|(w, _)| w),
        );
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Rebuilds the lookup table after deserialisation.
    pub fn reindexed(self) -> Self {
        Vocab::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if token == MASK {
            return Self::MASK_ID;
        }
        self.index.get(&token.to_lowercase()).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}
