use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{KEYWORD_CLOSE, KEYWORD_OPEN};
use crate::error::{Error, Result};

pub const UNK: &str = "[UNK]";
pub const SEP: &str = "[SEP]";
pub const CLS: &str = "[CLS]";

/// Lowercased alphanumeric runs, single punctuation characters, and the
/// keyword tags as atomic tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix(KEYWORD_OPEN) {
            out.push(KEYWORD_OPEN.to_string());
            rest = r;
            continue;
        }
        if let Some(r) = rest.strip_prefix(KEYWORD_CLOSE) {
            out.push(KEYWORD_CLOSE.to_string());
            rest = r;
            continue;
        }
        let c = rest.chars().next().expect("non-empty");
        if c.is_alphanumeric() {
            let end = rest.find(|ch: char| !ch.is_alphanumeric()).unwrap_or(rest.len());
            out.push(rest[..end].to_lowercase());
            rest = &rest[end..];
        } else {
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every token seen at least `min_count` times in
    /// lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = [UNK, SEP, CLS, KEYWORD_OPEN, KEYWORD_CLOSE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for (tok, n) in counts {
            if n >= min_count && !tokens.contains(&tok) {
                tokens.push(tok);
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(&self.tokens)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(serde_json::from_slice(&bytes)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_tags_are_atomic() {
        let t = tokenize("I love <Keyword>New York</Keyword>.");
        assert_eq!(t, ["i", "love", "<Keyword>", "new", "york", "</Keyword>", "."]);
    }

    #[test]
    fn schema_punctuation_is_split() {
        assert_eq!(tokenize("['a', 'b']"), ["[", "'", "a", "'", ",", "'", "b", "'", "]"]);
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocab::build(["alpha beta"], 1);
        assert_eq!(v.encode("alpha gamma"), vec![v.id("alpha"), 0]);
        assert_eq!(v.id(KEYWORD_OPEN), 3);
    }
}
