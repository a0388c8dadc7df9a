//! Whitespace vocabulary: one token per line, line number = piece id.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::encoder::{CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};

pub const IMG_ID: usize = 4;
pub const BOX_ID: usize = 5;
pub const UNK_ID: usize = 6;

pub const RESERVED: [&str; 7] = [
    "[CLS]", "[SEP]", "[PAD]", "[MASK]", "[IMG]", "[BOX]", "[UNK]",
];

const _: () = assert!(CLS_ID == 0 && SEP_ID == 1 && PAD_ID == 2 && MASK_ID == 3);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::Vocab(format!(
                "vocabulary must start with {}",
                RESERVED.join(" ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("malformed token {t:?} on line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Reserved tokens followed by the sorted distinct `words`.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let reserved: BTreeSet<&str> = RESERVED.into_iter().collect();
        let distinct: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| tokenize(w.as_ref()))
            .filter(|w| !reserved.contains(w.as_str()))
            .collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(distinct)
            .collect();
        Vocab::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of a word, `[UNK]` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.get(&token.to_lowercase()).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("piece id {id} outside vocabulary")))
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}
