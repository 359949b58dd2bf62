//! Word-level whitespace vocabulary.
//!
//! Word-level tokenization guarantees that the option letters "A" and "B"
//! are single tokens by construction, which the contrastive-pair machinery
//! relies on.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const OPTION_A: &str = "A";
pub const OPTION_B: &str = "B";

/// Token string ↔ id map with fixed specials pad=0, bos=1, eos=2, unk=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Build from a corpus: words ordered by descending frequency then
    /// lexicographically, ids starting after the specials; "A" and "B" are
    /// force-inserted if the corpus lacks them.
    pub fn build(corpus: &str) -> Result<Vocab> {
        if corpus.split_whitespace().next().is_none() {
            return Err(Error::EmptyInput("corpus for vocabulary"));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for word in corpus.split_whitespace() {
            if SPECIAL_TOKENS.contains(&word) {
                continue;
            }
            *counts.entry(word).or_insert(0) += 1;
        }
        let mut words: Vec<(&str, u64)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|(w, _)| w.to_string()));
        for letter in [OPTION_A, OPTION_B] {
            if !tokens.iter().any(|t| t == letter) {
                tokens.push(letter.to_string());
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 4 || tokens[..4] != SPECIAL_TOKENS.map(String::from) {
            return Err(Error::Data(
                "vocab must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {t:?}")));
            }
        }
        for letter in [OPTION_A, OPTION_B] {
            if !ids.contains_key(letter) {
                return Err(Error::Data(format!("vocab missing option token {letter:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn option_a(&self) -> u32 {
        self.ids[OPTION_A]
    }

    pub fn option_b(&self) -> u32 {
        self.ids[OPTION_B]
    }

    /// Tokenize whitespace-delimited text; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.ids.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// `<bos>` + words, for conditioning prefixes.
    pub fn encode_prefix(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids
    }

    /// `<bos>` + words + `<eos>`, for scoring and training whole lines.
    pub fn encode_sentence(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode_prefix(text);
        ids.push(EOS);
        ids
    }

    /// Render ids back to a space-joined string.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            match self.token(id) {
                Some(t) => words.push(t),
                None => {
                    return Err(Error::TokenOutOfRange { id, vocab: self.len() })
                }
            }
        }
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile { tokens: self.tokens.clone() })?)
    }

    pub fn from_json(json: &str) -> Result<Vocab> {
        let file: VocabFile = serde_json::from_str(json)?;
        Vocab::from_tokens(file.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocab::build("b a a").unwrap();
        assert_eq!(v.id_of("a"), Some(4));
        assert_eq!(v.id_of("b"), Some(5));
        // Forced option letters come after corpus words.
        assert_eq!(v.id_of("A"), Some(6));
        assert_eq!(v.id_of("B"), Some(7));
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build("pear apple pear apple cherry").unwrap();
        assert_eq!(v.id_of("apple"), Some(4));
        assert_eq!(v.id_of("pear"), Some(5));
        assert_eq!(v.id_of("cherry"), Some(6));
    }

    #[test]
    fn option_letters_always_present_and_not_duplicated() {
        let v = Vocab::build("A chose B and A won").unwrap();
        assert!(v.id_of("A").is_some());
        assert!(v.id_of("B").is_some());
        let n_a = v.tokens.iter().filter(|t| *t == "A").count();
        assert_eq!(n_a, 1);
    }

    #[test]
    fn rebuild_is_identical() {
        let corpus = "the cat sat on the mat";
        assert_eq!(Vocab::build(corpus).unwrap(), Vocab::build(corpus).unwrap());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocab::build("   \n\t ").is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build("the quick brown fox jumps").unwrap();
        let text = "the fox jumps  the\tbrown";
        let ids = v.encode(text);
        let back = v.decode(&ids).unwrap();
        assert_eq!(back, "the fox jumps the brown");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::build("alpha beta").unwrap();
        assert_eq!(v.encode("alpha gamma"), vec![4, UNK]);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::build("x y z z").unwrap();
        let j = v.to_json().unwrap();
        assert_eq!(Vocab::from_json(&j).unwrap(), v);
    }

    #[test]
    fn json_validation_rejects_bad_specials() {
        let j = r#"{"tokens": ["<pad>", "<bos>", "oops", "<unk>", "A", "B"]}"#;
        assert!(Vocab::from_json(j).is_err());
    }
}
