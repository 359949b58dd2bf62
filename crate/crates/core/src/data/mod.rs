//! Tokenization, dataset file formats, contrastive-pair reformulation,
//! biased-corpus construction, and the synthetic benchmark generator.

mod corpus;
mod formats;
mod pairs;
mod synth;
mod vocab;

pub use corpus::{build_bias_corpus, DEFAULT_TOXICITY_THRESHOLD};
pub use formats::{
    parse_jsonl, to_jsonl, BbqRecord, BiasEvalRecord, CommentRecord, McRecord,
    RenderedPairRecord, StereosetRecord,
};
pub use pairs::{
    make_contrastive_pairs, render_pairs, render_prefix, tokenize_pairs, ContrastivePair,
};
pub use synth::{
    gen_synthetic_benchmark, other_group_of, stereo_group_of, SynthBenchmark, SynthConfig,
    ATTRIBUTES, FACTS, GROUPS,
};
pub use vocab::{Vocab, BOS, EOS, OPTION_A, OPTION_B, PAD, SPECIAL_TOKENS, UNK};

/// Tokenized minimal pair for bias scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasEvalPair {
    pub stereo_tokens: Vec<u32>,
    pub anti_tokens: Vec<u32>,
    pub category: String,
}

/// Tokenized multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McItem {
    pub prompt_tokens: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub answer_index: usize,
}

/// Tokenize bias-eval records; both sentences are scored as
/// `<bos> words <eos>` sequences.
pub fn tokenize_bias_eval(records: &[BiasEvalRecord], vocab: &Vocab) -> crate::Result<Vec<BiasEvalPair>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.stereo.split_whitespace().next().is_none()
                || r.anti.split_whitespace().next().is_none()
            {
                return Err(crate::Error::Data(format!("bias-eval record {}: empty sentence", i + 1)));
            }
            Ok(BiasEvalPair {
                stereo_tokens: vocab.encode_sentence(&r.stereo),
                anti_tokens: vocab.encode_sentence(&r.anti),
                category: r.category.clone(),
            })
        })
        .collect()
}

/// Tokenize multiple-choice records.
pub fn tokenize_mc(records: &[McRecord], vocab: &Vocab) -> crate::Result<Vec<McItem>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let fail = |msg: &str| crate::Error::Data(format!("mc record {}: {msg}", i + 1));
            if r.choices.len() < 2 {
                return Err(fail("needs at least 2 choices"));
            }
            if r.answer_index >= r.choices.len() {
                return Err(fail("answer_index out of range"));
            }
            let choices: Vec<Vec<u32>> =
                r.choices.iter().map(|c| vocab.encode(c)).collect();
            if choices.iter().any(|c| c.is_empty()) {
                return Err(fail("empty choice"));
            }
            Ok(McItem {
                prompt_tokens: vocab.encode_prefix(&r.prompt),
                choices,
                answer_index: r.answer_index,
            })
        })
        .collect()
}

/// Split a text corpus into its nonempty lines.
pub fn corpus_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.trim().is_empty()).collect()
}
