//! Word-level vocabulary with frequency cutoff and fixed-length encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Post;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace; every character that is neither
/// alphanumeric nor whitespace becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    /// Index is the token id; entries 0 and 1 are PAD and UNK.
    pub tokens: Vec<String>,
    pub max_size: usize,
    pub min_count: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, max_size: usize, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, max_size, min_count, index }
    }

    /// Counts tokens over `posts`, keeps those seen at least `min_count` times,
    /// ranks by descending count (ties: lexicographic) and keeps the top
    /// `max_size - 2`.
    pub fn build(posts: &[Post], max_size: usize, min_count: usize) -> Self {
        assert!(max_size >= 2, "vocabulary needs room for PAD and UNK");
        let mut counts: HashMap<String, usize> = HashMap::new();
        for p in posts {
            for t in tokenize(&p.text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 2);
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens, max_size, min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Exactly `len` ids: head-truncated, PAD-filled at the tail.
    pub fn encode(&self, text: &str, len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text).iter().take(len).map(|t| self.id(t)).collect();
        ids.resize(len, PAD);
        ids
    }

    /// Tokens for every non-PAD id.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let v: Vocab = serde_json::from_str(s)?;
        Ok(Self::from_tokens(v.tokens, v.max_size, v.min_count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn posts(texts: &[&str]) -> Vec<Post> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Post {
                market_id: "m".into(),
                subforum_id: "s".into(),
                thread_id: "t".into(),
                post_id: format!("p{i}"),
                author_id: "a".into(),
                timestamp: 0,
                text: t.to_string(),
                thread_starter: None,
            })
            .collect()
    }

    #[test]
    fn punctuation_splits_into_own_tokens() {
        assert_eq!(tokenize("Who cares FBI."), vec!["who", "cares", "fbi", "."]);
        assert_eq!(tokenize("fe'd...ok"), vec!["fe", "'", "d", ".", ".", ".", "ok"]);
        assert_eq!(tokenize("  Guten\ttag!  "), vec!["guten", "tag", "!"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = Vocab::build(&[], 10, 1);
        assert_eq!(v.tokens, vec![PAD_TOKEN, UNK_TOKEN]);
    }

    #[test]
    fn frequency_ranking_and_cutoff() {
        let v = Vocab::build(&posts(&["a a b"]), 10, 1);
        assert_eq!(v.len(), 4);
        assert!(v.id("a") < v.id("b"));
        assert!(v.id("a") > UNK);
        let v2 = Vocab::build(&posts(&["a a b"]), 10, 2);
        assert_eq!(v2.len(), 3);
        assert_eq!(v2.encode("b", 1), vec![UNK]);
    }

    #[test]
    fn max_size_truncates_and_ties_are_lexicographic() {
        let v = Vocab::build(&posts(&["c b a d d"]), 4, 1);
        assert_eq!(v.tokens, vec![PAD_TOKEN, UNK_TOKEN, "d", "a"]);
    }

    #[test]
    fn encode_pads_and_truncates() {
        let v = Vocab::build(&posts(&["who cares fbi ."]), 100, 1);
        assert_eq!(v.encode("", 4), vec![PAD; 4]);
        let exact = v.encode("who cares fbi .", 4);
        assert!(!exact.contains(&PAD) && !exact.contains(&UNK));
        let ids = v.encode("who cares FBI.", 8);
        assert_eq!(&ids[..4], &[v.id("who"), v.id("cares"), v.id("fbi"), v.id(".")]);
        assert_eq!(&ids[4..], &[PAD; 4]);
        assert_eq!(v.encode("who cares fbi . who", 2), vec![v.id("who"), v.id("cares")]);
    }

    #[test]
    fn json_round_trip_restores_lookup() {
        let v = Vocab::build(&posts(&["x y y"]), 10, 1);
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("y"), v.id("y"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encode_length_is_fixed(text in "\\PC{0,60}", len in 1usize..20) {
                let v = Vocab::build(&posts(&["the a of"]), 10, 1);
                prop_assert_eq!(v.encode(&text, len).len(), len);
            }

            #[test]
            fn in_vocab_text_round_trips(words in proptest::collection::vec("[a-z]{1,6}", 0..10)) {
                let text = words.join(" ");
                let v = Vocab::build(&posts(&[&text]), 1000, 1);
                let ids = v.encode(&text, 16);
                prop_assert_eq!(v.decode(&ids), tokenize(&text));
            }
        }
    }
}
