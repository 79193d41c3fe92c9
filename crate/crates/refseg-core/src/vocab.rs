//! Whitespace tokenizer backed by a plain-text vocabulary file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Result;

pub const UNK_TOKEN: &str = "<unk>";

/// Word -> id table. Id 0 is always the unknown token.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build from a corpus of expressions; word order is first occurrence.
    pub fn build<'a>(expressions: impl Iterator<Item = &'a str>) -> Self {
        let mut words = vec![UNK_TOKEN.to_string()];
        let mut index = BTreeMap::new();
        index.insert(UNK_TOKEN.to_string(), 0);
        for expr in expressions {
            for tok in tokenize_words(expr) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), words.len());
                    words.push(tok);
                }
            }
        }
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Map an expression to token ids; unknown words map to id 0.
    pub fn encode(&self, expression: &str) -> Vec<usize> {
        tokenize_words(expression)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or(0))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.words.join("\n"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            index.insert(w.clone(), i);
        }
        Ok(Self { words, index })
    }

    /// Word list, id order; used to embed the vocabulary in checkpoints.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            index.insert(w.clone(), i);
        }
        Self { words, index }
    }
}

fn tokenize_words(expression: &str) -> Vec<String> {
    expression
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_and_encodes() {
        let exprs = ["red circle", "blue square on the left"];
        let v = Vocab::build(exprs.iter().copied());
        assert_eq!(v.encode("red circle"), vec![1, 2]);
        assert_eq!(v.encode("RED Circle"), vec![1, 2]);
        // unknown word maps to <unk> = 0
        assert_eq!(v.encode("green circle"), vec![0, 2]);
    }

    #[test]
    fn round_trips_through_file() {
        let exprs = ["red circle", "blue square"];
        let v = Vocab::build(exprs.iter().copied());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v.words(), v2.words());
        assert_eq!(v.encode("blue circle"), v2.encode("blue circle"));
    }
}
