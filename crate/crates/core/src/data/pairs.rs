//! BBQ-style reformulation into contrastive pairs.
//!
//! Ambiguous records are rendered into a prefix that ends with
//! "Answer: Option", so the advantaged/disadvantaged completions are the
//! bare option letters and the two full sequences differ in exactly the
//! final token.

use serde::{Deserialize, Serialize};

use super::formats::{BbqRecord, RenderedPairRecord};
use super::vocab::Vocab;
use crate::{Error, Result};

/// Tokenized prefix with single-token advantaged/disadvantaged completions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub prefix_tokens: Vec<u32>,
    pub advantaged: u32,
    pub disadvantaged: u32,
    pub group: String,
}

impl ContrastivePair {
    /// Full advantaged sequence (prefix + advantaged token).
    pub fn advantaged_sequence(&self) -> Vec<u32> {
        let mut s = self.prefix_tokens.clone();
        s.push(self.advantaged);
        s
    }

    /// Full disadvantaged sequence (prefix + disadvantaged token).
    pub fn disadvantaged_sequence(&self) -> Vec<u32> {
        let mut s = self.prefix_tokens.clone();
        s.push(self.disadvantaged);
        s
    }
}

/// Render the contrastive prefix for a record. The option letters stay in
/// the order the record gives them.
pub fn render_prefix(record: &BbqRecord) -> String {
    format!(
        "{} {} Choose among the following two options: A: {}; B: {}. Answer: Option",
        record.context, record.question, record.option_a, record.option_b
    )
}

/// Reformulate raw records into rendered pairs, keeping only ambiguous ones.
pub fn render_pairs(records: &[BbqRecord]) -> Result<Vec<RenderedPairRecord>> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if !r.ambiguous {
            continue;
        }
        let (advantaged, disadvantaged) = match r.stereotyped.as_str() {
            "a" => ("A", "B"),
            "b" => ("B", "A"),
            other => {
                return Err(Error::Data(format!(
                    "record {}: stereotyped must be \"a\" or \"b\", got {other:?}",
                    i + 1
                )))
            }
        };
        out.push(RenderedPairRecord {
            prefix: render_prefix(r),
            advantaged: advantaged.into(),
            disadvantaged: disadvantaged.into(),
            group: r.group.clone(),
        });
    }
    Ok(out)
}

/// Tokenize rendered pairs against a vocabulary.
pub fn tokenize_pairs(records: &[RenderedPairRecord], vocab: &Vocab) -> Result<Vec<ContrastivePair>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let fail = |msg: String| Error::Data(format!("pair {}: {msg}", i + 1));
            // Single-token by vocab construction; asserted anyway.
            let advantaged = single_token(vocab, &r.advantaged)
                .map_err(|m| fail(m))?;
            let disadvantaged = single_token(vocab, &r.disadvantaged)
                .map_err(|m| fail(m))?;
            if advantaged == disadvantaged {
                return Err(fail("advantaged and disadvantaged tokens are equal".into()));
            }
            let prefix_tokens = vocab.encode_prefix(&r.prefix);
            if prefix_tokens.len() < 2 {
                return Err(fail("empty prefix".into()));
            }
            Ok(ContrastivePair {
                prefix_tokens,
                advantaged,
                disadvantaged,
                group: r.group.clone(),
            })
        })
        .collect()
}

/// Reformulate + tokenize in one step.
pub fn make_contrastive_pairs(records: &[BbqRecord], vocab: &Vocab) -> Result<Vec<ContrastivePair>> {
    tokenize_pairs(&render_pairs(records)?, vocab)
}

fn single_token(vocab: &Vocab, word: &str) -> std::result::Result<u32, String> {
    if word.split_whitespace().count() != 1 {
        return Err(format!("completion {word:?} is not a single token"));
    }
    vocab
        .id_of(word.trim())
        .ok_or_else(|| format!("completion {word:?} not in vocab"))
}
