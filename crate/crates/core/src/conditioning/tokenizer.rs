use std::collections::HashMap;
use std::path::Path;

use crate::error::{ensure, Result};

pub const MAX_TOKENS: usize = 77;
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

const DEFAULT_VOCAB: &str = include_str!("../../assets/vocab.txt");

/// Whitespace word-level vocabulary, one token per line.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    unk: usize,
}

impl Vocab {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            ensure!(index.insert(t.clone(), i).is_none(), Config, "duplicate vocabulary entry {:?}", t);
        }
        let pad = *index.get(PAD).ok_or_else(|| crate::Error::Config(format!("vocabulary lacks {PAD}")))?;
        let unk = *index.get(UNK).ok_or_else(|| crate::Error::Config(format!("vocabulary lacks {UNK}")))?;
        Ok(Vocab { tokens, index, pad, unk })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("bundled vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Lower-cased whitespace split, truncated to [`MAX_TOKENS`] and padded
    /// out to exactly that length.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> =
            text.split_whitespace().take(MAX_TOKENS).map(|w| *self.index.get(&w.to_lowercase()).unwrap_or(&self.unk)).collect();
        ids.resize(MAX_TOKENS, self.pad);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_truncates_and_maps_unknowns() {
        let v = Vocab::builtin();
        let ids = v.encode("A warm scene with zebra");
        assert_eq!(ids.len(), MAX_TOKENS);
        assert_eq!(v.token(ids[0]), "a");
        assert_eq!(ids[4], v.unk_id());
        assert!(ids[5..].iter().all(|&i| i == v.pad_id()));
        assert!(v.encode("").iter().all(|&i| i == v.pad_id()));
        let long = "box ".repeat(100);
        assert!(v.encode(&long).iter().all(|&i| v.token(i) == "box"));
    }

    #[test]
    fn vocab_needs_special_tokens() {
        assert!(Vocab::parse("a\nb\n").is_err());
        assert!(Vocab::parse("<pad>\n<unk>\na\na\n").is_err());
    }
}
