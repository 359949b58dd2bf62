//! Bias, perplexity, and multiple-choice evaluation.
//!
//! The bias score aggregates per-pair contributions of 0, ½, or 1 as exact
//! integer half-points and rounds the mean once onto the uniform 2⁻⁵³ grid.
//! That rounding is the correctly-rounded mean (error ≤ 2⁻⁵⁴) and makes the
//! stereo/anti swap map a score s to exactly 1 − s in f64, which keeps the
//! scorer property-testable.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{BiasEvalPair, McItem, BOS, EOS};
use crate::model::{sequence_logprob, ParameterSet};
use crate::{Error, Result};

/// Two sequence log-likelihoods are a tie when they agree this closely.
pub const TIE_EPS: f64 = 1e-9;

/// Mean of `halfpoints`/2 over `n` items, correctly rounded on the 2⁻⁵³
/// grid. Complement-exact: ratio_on_grid(2n−k, n) == 1 − ratio_on_grid(k, n).
fn ratio_on_grid(halfpoints: u64, n: u64) -> f64 {
    debug_assert!(halfpoints <= 2 * n);
    let denom = 2 * n as u128;
    let num = (halfpoints as u128) << 53;
    let q = num / denom;
    let r = num % denom;
    let mut j = q as u64;
    if 2 * r > denom || (2 * r == denom && j & 1 == 1) {
        j += 1;
    }
    j as f64 * (2.0f64).powi(-53)
}

/// Bias score over minimal pairs with per-category breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasScore {
    pub bias_score: f64,
    /// category → (bias score over that category, pair count)
    pub per_category: BTreeMap<String, (f64, usize)>,
    pub n_pairs: usize,
    /// Pairs whose two likelihoods tied within [`TIE_EPS`].
    pub n_ties: usize,
}

/// Per-pair contribution in half-points: 2 when the stereotypical sentence
/// is more likely, 1 on a tie, 0 otherwise.
fn pair_halfpoints(stereo_lp: f64, anti_lp: f64) -> u64 {
    if (stereo_lp - anti_lp).abs() <= TIE_EPS {
        1
    } else if stereo_lp > anti_lp {
        2
    } else {
        0
    }
}

/// Fraction of pairs where the model prefers the stereotypical sentence;
/// ties count one half. 0.5 is unbiased.
pub fn crows_bias_score(params: &ParameterSet, pairs: &[BiasEvalPair]) -> Result<BiasScore> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("bias evaluation pairs"));
    }
    let scored: Vec<Result<u64>> = pairs
        .par_iter()
        .map(|p| {
            let stereo = sequence_logprob(params, &p.stereo_tokens)?;
            let anti = sequence_logprob(params, &p.anti_tokens)?;
            Ok(pair_halfpoints(stereo, anti))
        })
        .collect();

    let mut total = 0u64;
    let mut ties = 0usize;
    let mut by_category: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for (pair, hp) in pairs.iter().zip(scored) {
        let hp = hp?;
        total += hp;
        if hp == 1 {
            ties += 1;
        }
        let entry = by_category.entry(pair.category.clone()).or_insert((0, 0));
        entry.0 += hp;
        entry.1 += 1;
    }
    let per_category = by_category
        .into_iter()
        .map(|(cat, (hp, n))| (cat, (ratio_on_grid(hp, n), n as usize)))
        .collect();
    Ok(BiasScore {
        bias_score: ratio_on_grid(total, pairs.len() as u64),
        per_category,
        n_pairs: pairs.len(),
        n_ties: ties,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityResult {
    pub perplexity: f64,
    pub n_tokens: usize,
}

/// Corpus perplexity: documents are concatenated with `<eos>` separators
/// behind a single leading `<bos>`, and every position after the first is
/// scored exactly once. Streams longer than the context are split into
/// windows that overlap by one conditioning token.
pub fn perplexity(params: &ParameterSet, docs: &[Vec<u32>]) -> Result<PerplexityResult> {
    let mut stream = vec![BOS];
    for d in docs {
        stream.extend_from_slice(d);
        stream.push(EOS);
    }
    if stream.len() < 2 {
        return Err(Error::EmptyInput("perplexity corpus"));
    }
    let max_len = params.config().max_seq_len;
    let mut nll = 0.0f64;
    let mut count = 0usize;
    let mut start = 0usize;
    while start + 1 < stream.len() {
        let end = (start + max_len).min(stream.len());
        let window = &stream[start..end];
        let lp = sequence_logprob(params, window)?;
        nll -= lp;
        count += window.len() - 1;
        if end == stream.len() {
            break;
        }
        start = end - 1;
    }
    Ok(PerplexityResult { perplexity: (nll / count as f64).exp(), n_tokens: count })
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub accuracy: f64,
    pub n_items: usize,
}

/// Length-normalized likelihood ranking: the predicted choice maximizes
/// (logprob of the choice tokens given the prompt) / (choice token count);
/// ties go to the lowest choice index.
pub fn mc_accuracy(params: &ParameterSet, items: &[McItem]) -> Result<McResult> {
    if items.is_empty() {
        return Err(Error::EmptyInput("multiple-choice items"));
    }
    let correct: Vec<Result<bool>> = items
        .par_iter()
        .map(|item| {
            if item.choices.len() < 2 {
                return Err(Error::Data("multiple-choice item with < 2 choices".into()));
            }
            let prompt_lp = if item.prompt_tokens.len() >= 2 {
                sequence_logprob(params, &item.prompt_tokens)?
            } else {
                0.0
            };
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (i, choice) in item.choices.iter().enumerate() {
                let mut seq = item.prompt_tokens.clone();
                seq.extend_from_slice(choice);
                let lp = sequence_logprob(params, &seq)? - prompt_lp;
                let score = lp / choice.len() as f64;
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            Ok(best == item.answer_index)
        })
        .collect();
    let mut n_correct = 0usize;
    for c in correct {
        if c? {
            n_correct += 1;
        }
    }
    Ok(McResult { accuracy: n_correct as f64 / items.len() as f64, n_items: items.len() })
}

/// Per-category entry in the serialized report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CategoryReport {
    pub bias_score: f64,
    pub count: usize,
}

/// Full evaluation of one checkpoint.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub bias_score: f64,
    pub delta: f64,
    pub per_category: BTreeMap<String, CategoryReport>,
    pub perplexity: f64,
    pub mc_accuracy: f64,
    pub n_pairs: usize,
    pub n_ppl_tokens: usize,
    pub n_mc: usize,
    pub n_tied_pairs: usize,
    pub config_hash: String,
    pub checkpoint_path: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Run the full suite; `config_hash` and `checkpoint_path` identify the
/// evaluated artifact in the report.
pub fn run_full_eval(
    params: &ParameterSet,
    pairs: &[BiasEvalPair],
    ppl_docs: &[Vec<u32>],
    mc_items: &[McItem],
    config_hash: String,
    checkpoint_path: String,
) -> Result<EvalReport> {
    let bias = crows_bias_score(params, pairs)?;
    let ppl = perplexity(params, ppl_docs)?;
    let mc = mc_accuracy(params, mc_items)?;
    Ok(EvalReport {
        bias_score: bias.bias_score,
        delta: (bias.bias_score - 0.5).abs(),
        per_category: bias
            .per_category
            .into_iter()
            .map(|(c, (s, n))| (c, CategoryReport { bias_score: s, count: n }))
            .collect(),
        perplexity: ppl.perplexity,
        mc_accuracy: mc.accuracy,
        n_pairs: bias.n_pairs,
        n_ppl_tokens: ppl.n_tokens,
        n_mc: mc.n_items,
        n_tied_pairs: bias.n_ties,
        config_hash,
        checkpoint_path,
    })
}

/// Hex SHA-256 over concatenated byte chunks; used to fingerprint the
/// evaluation configuration in reports.
pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn toy_params(seed: u64) -> ParameterSet {
        init_model(&ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 24,
            max_seq_len: 16,
            init_seed: seed,
        })
        .unwrap()
    }

    /// All-zero weights: logits are uniformly zero at every position.
    fn uniform_params(vocab: usize) -> ParameterSet {
        let mut p = init_model(&ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: vocab,
            max_seq_len: 32,
            init_seed: 0,
        })
        .unwrap();
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        p
    }

    #[test]
    fn grid_ratio_is_complement_exact_and_correctly_rounded() {
        for n in [1u64, 3, 7, 100, 250, 1000] {
            for k in 0..=(2 * n) {
                let s = ratio_on_grid(k, n);
                let sw = ratio_on_grid(2 * n - k, n);
                assert_eq!(sw, 1.0 - s, "n={n} k={k}");
                let exact = k as f64 / (2 * n) as f64;
                assert!((s - exact).abs() <= 2.0f64.powi(-54), "n={n} k={k}");
            }
        }
    }

    fn random_pairs(params: &ParameterSet, n: usize, seed: u64) -> Vec<BiasEvalPair> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = params.config().vocab_size as u32;
        (0..n)
            .map(|i| {
                let len = rng.gen_range(3..6);
                let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                    let mut t = vec![BOS];
                    t.extend((0..len).map(|_| rng.gen_range(4..v)));
                    t.push(EOS);
                    t
                };
                BiasEvalPair {
                    stereo_tokens: mk(&mut rng),
                    anti_tokens: mk(&mut rng),
                    category: format!("cat{}", i % 3),
                }
            })
            .collect()
    }

    #[test]
    fn model_that_always_prefers_stereo_scores_one() {
        let params = toy_params(3);
        // Orient each random pair so the stereo side is the likelier one.
        let pairs: Vec<BiasEvalPair> = random_pairs(&params, 20, 1)
            .into_iter()
            .map(|mut p| {
                let s = sequence_logprob(&params, &p.stereo_tokens).unwrap();
                let a = sequence_logprob(&params, &p.anti_tokens).unwrap();
                if a > s {
                    std::mem::swap(&mut p.stereo_tokens, &mut p.anti_tokens);
                }
                p
            })
            .collect();
        let score = crows_bias_score(&params, &pairs).unwrap();
        assert_eq!(score.bias_score, 1.0);
        assert_eq!((score.bias_score - 0.5).abs(), 0.5);
    }

    #[test]
    fn identical_sentences_tie_at_half() {
        let params = toy_params(3);
        let tokens = vec![BOS, 5, 9, 4, EOS];
        let pairs = vec![BiasEvalPair {
            stereo_tokens: tokens.clone(),
            anti_tokens: tokens,
            category: "c".into(),
        }];
        let score = crows_bias_score(&params, &pairs).unwrap();
        assert_eq!(score.bias_score, 0.5);
        assert_eq!(score.n_ties, 1);
    }

    #[test]
    fn bias_score_is_permutation_invariant() {
        let params = toy_params(9);
        let pairs = random_pairs(&params, 25, 7);
        let a = crows_bias_score(&params, &pairs).unwrap();
        let mut reversed = pairs.clone();
        reversed.reverse();
        let b = crows_bias_score(&params, &reversed).unwrap();
        assert_eq!(a.bias_score.to_bits(), b.bias_score.to_bits());
        assert_eq!(a.per_category, b.per_category);
    }

    #[test]
    fn swapping_stereo_and_anti_maps_score_to_exact_complement() {
        let params = toy_params(11);
        let pairs = random_pairs(&params, 40, 13);
        let orig = crows_bias_score(&params, &pairs).unwrap();
        let swapped_pairs: Vec<BiasEvalPair> = pairs
            .iter()
            .map(|p| BiasEvalPair {
                stereo_tokens: p.anti_tokens.clone(),
                anti_tokens: p.stereo_tokens.clone(),
                category: p.category.clone(),
            })
            .collect();
        let swapped = crows_bias_score(&params, &swapped_pairs).unwrap();
        assert_eq!(swapped.bias_score, 1.0 - orig.bias_score);
        for (cat, (s, n)) in &orig.per_category {
            let (sw, nw) = swapped.per_category[cat];
            assert_eq!(sw, 1.0 - s);
            assert_eq!(nw, *n);
        }
    }

    #[test]
    fn per_category_counts_sum_to_n_pairs() {
        let params = toy_params(5);
        let pairs = random_pairs(&params, 17, 3);
        let score = crows_bias_score(&params, &pairs).unwrap();
        let total: usize = score.per_category.values().map(|(_, n)| n).sum();
        assert_eq!(total, score.n_pairs);
        assert_eq!(score.n_pairs, 17);
    }

    #[test]
    fn uniform_model_perplexity_equals_vocab_size() {
        for vocab in [10usize, 100] {
            let params = uniform_params(vocab);
            let docs = vec![vec![4u32, 5, 6, 7], vec![8, 9 % vocab as u32]];
            let r = perplexity(&params, &docs).unwrap();
            assert!(
                (r.perplexity - vocab as f64).abs() < 1e-3,
                "vocab {vocab}: {}",
                r.perplexity
            );
        }
    }

    #[test]
    fn perplexity_is_at_least_one_and_deterministic() {
        let params = toy_params(2);
        let docs = vec![vec![4u32, 7, 9], vec![5, 6]];
        let a = perplexity(&params, &docs).unwrap();
        let b = perplexity(&params, &docs).unwrap();
        assert!(a.perplexity >= 1.0);
        assert_eq!(a.perplexity.to_bits(), b.perplexity.to_bits());
        assert_eq!(a.n_tokens, 3 + 1 + 2 + 1);
    }

    #[test]
    fn perplexity_matches_brute_force_product() {
        use crate::model::forward;
        let params = toy_params(6);
        let docs = vec![vec![4u32, 9, 11, 5, 7, 8, 3, 12]];
        let r = perplexity(&params, &docs).unwrap();

        let mut stream = vec![BOS];
        stream.extend_from_slice(&docs[0]);
        stream.push(EOS);
        let logits = forward(&params, &stream).unwrap();
        let mut log_product = 0.0f64;
        for t in 1..stream.len() {
            let row = logits.row(t - 1);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            log_product += (exps[stream[t] as usize] / denom).ln();
        }
        let brute = (-log_product / (stream.len() - 1) as f64).exp();
        assert!(
            (r.perplexity - brute).abs() / brute < 1e-6,
            "{} vs {brute}",
            r.perplexity
        );
    }

    #[test]
    fn perplexity_windowing_covers_long_streams() {
        let params = toy_params(2); // max_seq_len 16
        let long: Vec<u32> = (0..50).map(|i| 4 + (i % 12) as u32).collect();
        let r = perplexity(&params, &[long.clone()]).unwrap();
        assert_eq!(r.n_tokens, long.len() + 1); // words + eos
        assert!(r.perplexity.is_finite());
    }

    #[test]
    fn mc_ties_pick_the_lowest_index_under_a_uniform_model() {
        let params = uniform_params(24);
        let items = vec![McItem {
            prompt_tokens: vec![BOS, 4, 5],
            choices: vec![vec![7], vec![8], vec![9]],
            answer_index: 2,
        }];
        // Uniform model scores equal-length choices identically → index 0.
        let r = mc_accuracy(&params, &items).unwrap();
        assert_eq!(r.accuracy, 0.0);
        let items = vec![McItem {
            prompt_tokens: vec![BOS, 4, 5],
            choices: vec![vec![7], vec![8]],
            answer_index: 0,
        }];
        assert_eq!(mc_accuracy(&params, &items).unwrap().accuracy, 1.0);
    }

    #[test]
    fn overfit_model_answers_memorized_facts() {
        use crate::train::{train_lm, TrainConfig};
        let params = toy_params(1);
        // Teach: token 10 follows [4,5]; token 11 follows [4,6].
        let lines = vec![vec![BOS, 4, 5, 10, EOS], vec![BOS, 4, 6, 11, EOS]];
        let run = train_lm(
            &params,
            &lines,
            &TrainConfig {
                steps: 150,
                learning_rate: 3e-3,
                batch_size: 2,
                grad_accum: 1,
                seed: 0,
            },
        )
        .unwrap();
        let items = vec![
            McItem {
                prompt_tokens: vec![BOS, 4, 5],
                choices: vec![vec![11], vec![10]],
                answer_index: 1,
            },
            McItem {
                prompt_tokens: vec![BOS, 4, 6],
                choices: vec![vec![11], vec![10]],
                answer_index: 0,
            },
        ];
        let r = mc_accuracy(&run.params, &items).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn report_fixture_matches_published_shape() {
        // Model-scale magnitudes serve as fixtures for the report format:
        // a bias score of 0.667 must round-trip with Δ = 0.167.
        let report = EvalReport {
            bias_score: 0.667,
            delta: (0.667f64 - 0.5).abs(),
            per_category: BTreeMap::from([(
                "gender".to_string(),
                CategoryReport { bias_score: 0.625, count: 262 },
            )]),
            perplexity: 8.79,
            mc_accuracy: 0.5923,
            n_pairs: 1508,
            n_ppl_tokens: 1000,
            n_mc: 100,
            n_tied_pairs: 0,
            config_hash: "abc".into(),
            checkpoint_path: "base.ulkt".into(),
        };
        assert!((report.delta - 0.167).abs() < 1e-12);
        let json = report.to_json().unwrap();
        for field in [
            "bias_score",
            "delta",
            "per_category",
            "perplexity",
            "mc_accuracy",
            "n_pairs",
            "n_ppl_tokens",
            "n_mc",
            "config_hash",
            "checkpoint_path",
        ] {
            assert!(json.contains(field), "missing {field}");
        }
        let json2 = report.to_json().unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let params = toy_params(0);
        assert!(crows_bias_score(&params, &[]).is_err());
        assert!(perplexity(&params, &[]).is_err());
        assert!(mc_accuracy(&params, &[]).is_err());
    }

    #[test]
    fn sha256_hex_is_stable() {
        let a = sha256_hex(&[b"abc"]);
        assert_eq!(
            a,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(sha256_hex(&[b"a", b"bc"]), a);
    }
}
