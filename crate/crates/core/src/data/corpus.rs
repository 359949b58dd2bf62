//! Biased-corpus construction from StereoSet-like and comment records.

use super::formats::{CommentRecord, StereosetRecord};
use crate::{Error, Result};

pub const DEFAULT_TOXICITY_THRESHOLD: f64 = 0.5;

/// Comment domains considered to carry social bias.
const KEPT_DOMAINS: [&str; 2] = ["identity_attack", "sexual_explicit"];

fn normalize_domain(domain: &str) -> String {
    domain.trim().to_lowercase().replace(' ', "_")
}

/// One line per kept record: every stereoset record contributes
/// `context + " " + stereotyped_sentence`; a comment is kept iff its
/// toxicity is strictly greater than `threshold` and its domain is
/// identity attack or sexual explicit. Output order is input order,
/// stereoset records first.
pub fn build_bias_corpus(
    stereoset: &[StereosetRecord],
    comments: &[CommentRecord],
    threshold: f64,
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Data(format!(
            "toxicity threshold {threshold} outside [0, 1]"
        )));
    }
    let mut lines = Vec::new();
    for r in stereoset {
        lines.push(format!("{} {}", r.context, r.stereotyped_sentence));
    }
    for (i, c) in comments.iter().enumerate() {
        if !(0.0..=1.0).contains(&c.toxicity) {
            return Err(Error::Data(format!(
                "comment {}: toxicity {} outside [0, 1]",
                i + 1,
                c.toxicity
            )));
        }
        let domain = normalize_domain(&c.domain);
        if c.toxicity > threshold && KEPT_DOMAINS.contains(&domain.as_str()) {
            lines.push(c.text.clone());
        }
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comment(toxicity: f64, domain: &str) -> CommentRecord {
        CommentRecord { text: format!("comment in {domain}"), toxicity, domain: domain.into() }
    }

    #[test]
    fn stereoset_records_concatenate_context_and_sentence() {
        let records = vec![StereosetRecord {
            context: "the nurse walked in".into(),
            stereotyped_sentence: "she was gentle".into(),
            domain: "profession".into(),
        }];
        let lines = build_bias_corpus(&records, &[], 0.5).unwrap();
        assert_eq!(lines, vec!["the nurse walked in she was gentle"]);
    }

    #[test]
    fn toxicity_exactly_at_threshold_is_dropped() {
        let lines =
            build_bias_corpus(&[], &[comment(0.5, "identity_attack")], 0.5).unwrap();
        assert!(lines.is_empty());
        let lines =
            build_bias_corpus(&[], &[comment(0.500001, "identity_attack")], 0.5).unwrap();
        assert_eq!(lines.len(), 1);
    }

    #[test]
    fn off_domain_comments_are_dropped_even_when_toxic() {
        let lines = build_bias_corpus(&[], &[comment(0.9, "insult")], 0.5).unwrap();
        assert!(lines.is_empty());
    }

    #[test]
    fn domain_matching_tolerates_spaces_and_case() {
        let lines = build_bias_corpus(
            &[],
            &[comment(0.8, "Identity Attack"), comment(0.8, "sexual explicit")],
            0.5,
        )
        .unwrap();
        assert_eq!(lines.len(), 2);
    }

    #[test]
    fn line_count_is_stereoset_plus_kept_comments() {
        let stereoset = vec![
            StereosetRecord {
                context: "a".into(),
                stereotyped_sentence: "b".into(),
                domain: "race".into(),
            };
            3
        ];
        let comments = vec![
            comment(0.9, "identity_attack"),
            comment(0.4, "identity_attack"),
            comment(0.95, "threat"),
            comment(0.7, "sexual_explicit"),
        ];
        let lines = build_bias_corpus(&stereoset, &comments, 0.5).unwrap();
        assert_eq!(lines.len(), 3 + 2);
        // Input order preserved: stereoset first, then kept comments.
        assert_eq!(lines[3], "comment in identity_attack");
        assert_eq!(lines[4], "comment in sexual_explicit");
    }

    #[test]
    fn bad_toxicity_is_rejected() {
        assert!(build_bias_corpus(&[], &[comment(1.2, "identity_attack")], 0.5).is_err());
        assert!(build_bias_corpus(&[], &[comment(0.9, "identity_attack")], 1.5).is_err());
    }
}
