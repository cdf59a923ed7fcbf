//! Word-level tokenizer and vocabulary for the toy language model.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Placeholder for injected retrieval information.
pub const RET: usize = 4;

pub const SPECIALS: [&str; 5] = ["<PAD>", "<BOS>", "<EOS>", "<UNK>", "<R>"];

/// Splits on whitespace; every ASCII punctuation character is its own token
/// and special tokens such as `<R>` are kept whole.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().expect("in bounds");
        let w = c.len_utf8();
        if c == '<' {
            if let Some(sp) = SPECIALS.iter().find(|s| bytes[i..].starts_with(s.as_bytes())) {
                if let Some(s) = start.take() {
                    out.push(&text[s..i]);
                }
                out.push(&text[i..i + sp.len()]);
                i += sp.len();
                continue;
            }
        }
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            if c.is_ascii_punctuation() {
                out.push(&text[i..i + w]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
        i += w;
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Token ids with a per-position loss mask.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        let loss_mask = alloc::vec![false; ids.len()];
        Self { ids, loss_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: usize, supervised: bool) {
        self.ids.push(id);
        self.loss_mask.push(supervised);
    }

    pub fn extend(&mut self, other: &TokenSeq) {
        self.ids.extend_from_slice(&other.ids);
        self.loss_mask.extend_from_slice(&other.loss_mask);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every distinct token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in split_words(t) {
                if !SPECIALS.contains(&w) {
                    words.insert(w.to_string());
                }
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("built vocab is well formed")
    }

    /// Rebuilds a vocabulary from its token list (id = position).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(alloc::format!("invalid token at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(alloc::format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
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
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        TokenSeq::new(split_words(text).into_iter().map(|w| self.id(w)).collect())
    }

    /// Space-joined tokens; specials other than `<R>`/`<UNK>` are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or("<UNK>"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation_and_specials() {
        assert_eq!(
            split_words("[1]similarity: <R>the color, of x?"),
            vec!["[", "1", "]", "similarity", ":", "<R>", "the", "color", ",", "of", "x", "?"]
        );
        assert_eq!(split_words("a<b"), vec!["a", "<", "b"]);
    }

    #[test]
    fn tokenizes_known_words() {
        let v = Vocab::build(["a b"]);
        let seq = v.tokenize("a b a");
        assert_eq!(seq.ids, vec![v.id("a"), v.id("b"), v.id("a")]);
        assert_eq!(seq.loss_mask, vec![false; 3]);
        assert_eq!(v.tokenize("zebra").ids, vec![UNK]);
        assert_eq!(v.tokenize("<R>").ids, vec![RET]);
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build(["<R> x"]);
        assert_eq!(v.token(RET), Some("<R>"));
        assert_eq!(v.len(), SPECIALS.len() + 1);
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_round_trips_up_to_whitespace(words in prop::collection::vec("[a-z]{1,6}|[.,?:]", 1..20)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str()]);
            let ids = v.tokenize(&text).ids;
            let back = v.detokenize(&ids);
            let squash = |s: &str| s.split_whitespace().collect::<String>();
            prop_assert_eq!(squash(&back), squash(&text));
            prop_assert_eq!(v.tokenize(&back).ids, ids);
        }
    }
}
