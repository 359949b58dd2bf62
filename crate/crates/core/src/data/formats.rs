//! JSONL record shapes for the dataset files this toolkit consumes and
//! produces. All files are UTF-8, one JSON object per line.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Contrastive input record (BBQ-like ambiguous question).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BbqRecord {
    pub context: String,
    pub question: String,
    pub option_a: String,
    pub option_b: String,
    /// Which option names the stereotyped target: "a" or "b".
    pub stereotyped: String,
    pub ambiguous: bool,
    pub group: String,
}

/// A contrastive pair after reformulation: rendered prefix plus the two
/// single-token completions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderedPairRecord {
    pub prefix: String,
    pub advantaged: String,
    pub disadvantaged: String,
    pub group: String,
}

/// Minimal-pair bias evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasEvalRecord {
    pub stereo: String,
    pub anti: String,
    pub category: String,
}

/// Multiple-choice task record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McRecord {
    pub prompt: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
}

/// StereoSet-like record for biased-corpus construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StereosetRecord {
    pub context: String,
    pub stereotyped_sentence: String,
    pub domain: String,
}

/// Civil-Comments-like record for biased-corpus construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommentRecord {
    pub text: String,
    pub toxicity: f64,
    pub domain: String,
}

/// Parse one record per line, reporting the offending line on failure.
pub fn parse_jsonl<T: DeserializeOwned>(content: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("line {}: {e}", i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Serialize records one JSON object per line, with a trailing newline.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
