//! Vocabulary contrast between two reply corpora.
//!
//! Answers "which words does model A lean on that model B avoids?" with an
//! add-one smoothed log-odds ratio per token. The score for token `w` is
//!
//! ```text
//! ln( (a_w + 1) / (A + V - a_w - 1) )  -  ln( (b_w + 1) / (B + V - b_w - 1) )
//! ```
//!
//! where `a_w`/`b_w` are the token's counts on each side, `A`/`B` the total
//! token counts, and `V` the joint vocabulary size. The formula is exactly
//! anti-symmetric: swapping the sides negates every score, so the two ranked
//! lists are mirror images and identical corpora produce no signal at all.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

/// Granularity of the contrast vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastUnit {
    /// Single lowercased words.
    Word,
    /// Adjacent word pairs within a document, joined with one space.
    Bigram,
}

/// One token with its contrast score and raw counts on both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastToken {
    pub token: String,
    /// Positive leans toward side A, negative toward side B.
    pub score: f64,
    pub count_a: u64,
    pub count_b: u64,
}

/// The two ranked leans, strongest first on each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub unit: ContrastUnit,
    /// Tokens with positive score, descending by score.
    pub side_a: Vec<ContrastToken>,
    /// Tokens with negative score, ascending by score (most negative first).
    pub side_b: Vec<ContrastToken>,
}

/// Lowercased Unicode word tokens of one document, expanded to the requested
/// unit.
fn tokens(doc: &str, unit: ContrastUnit) -> Vec<String> {
    let words: Vec<String> = doc
        .unicode_words()
        .map(|w| w.to_lowercase())
        .collect();
    match unit {
        ContrastUnit::Word => words,
        ContrastUnit::Bigram => words
            .windows(2)
            .map(|pair| format!("{} {}", pair[0], pair[1]))
            .collect(),
    }
}

fn count_side(docs: &[&str], unit: ContrastUnit) -> (BTreeMap<String, u64>, u64) {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0u64;
    for doc in docs {
        for token in tokens(doc, unit) {
            *counts.entry(token).or_default() += 1;
            total += 1;
        }
    }
    (counts, total)
}

/// Contrasts two reply corpora and returns the `top_k` strongest leans per
/// side. Ties in score break alphabetically so output is deterministic.
///
/// Degenerate inputs are safe: an empty side simply pushes every token to the
/// other side, and two identical sides produce two empty lists. (The odds
/// denominator is clamped to at least 1, which only matters for vocabularies
/// so small the odds would otherwise be infinite.)
pub fn word_contrast(
    docs_a: &[&str],
    docs_b: &[&str],
    unit: ContrastUnit,
    top_k: usize,
) -> ContrastReport {
    let (counts_a, total_a) = count_side(docs_a, unit);
    let (counts_b, total_b) = count_side(docs_b, unit);

    let mut vocabulary: Vec<&str> = counts_a.keys().map(String::as_str).collect();
    vocabulary.extend(counts_b.keys().map(String::as_str));
    vocabulary.sort_unstable();
    vocabulary.dedup();
    let vocab_size = vocabulary.len() as u64;

    let smoothed_log_odds = |count: u64, total: u64| -> f64 {
        let numerator = (count + 1) as f64;
        let denominator = (total + vocab_size - count - 1).max(1) as f64;
        (numerator / denominator).ln()
    };

    let mut scored: Vec<ContrastToken> = vocabulary
        .into_iter()
        .map(|token| {
            let count_a = counts_a.get(token).copied().unwrap_or(0);
            let count_b = counts_b.get(token).copied().unwrap_or(0);
            ContrastToken {
                token: token.to_string(),
                score: smoothed_log_odds(count_a, total_a) - smoothed_log_odds(count_b, total_b),
                count_a,
                count_b,
            }
        })
        .collect();

    let mut side_a: Vec<ContrastToken> = scored
        .iter()
        .filter(|t| t.score > 0.0)
        .cloned()
        .collect();
    side_a.sort_by(|x, y| {
        y.score
            .partial_cmp(&x.score)
            .expect("scores are never NaN")
            .then_with(|| x.token.cmp(&y.token))
    });
    side_a.truncate(top_k);

    scored.retain(|t| t.score < 0.0);
    scored.sort_by(|x, y| {
        x.score
            .partial_cmp(&y.score)
            .expect("scores are never NaN")
            .then_with(|| x.token.cmp(&y.token))
    });
    scored.truncate(top_k);

    ContrastReport {
        unit,
        side_a,
        side_b: scored,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_corpora_have_no_leans() {
        let docs = ["the same words", "again the same"];
        let report = word_contrast(&docs, &docs, ContrastUnit::Word, 10);
        assert!(report.side_a.is_empty());
        assert!(report.side_b.is_empty());
    }

    #[test]
    fn distinctive_words_surface_on_the_right_sides() {
        let a = ["truly wonderful pick", "wonderful story wonderful cast"];
        let b = ["a fine pick", "fine story and fine cast"];
        let report = word_contrast(&a, &b, ContrastUnit::Word, 5);
        assert_eq!(report.side_a[0].token, "wonderful");
        assert_eq!(report.side_b[0].token, "fine");
        assert!(report.side_a[0].score > 0.0);
        assert!(report.side_b[0].score < 0.0);
        assert_eq!(report.side_a[0].count_a, 3);
        assert_eq!(report.side_a[0].count_b, 0);
    }

    #[test]
    fn bigrams_capture_fixed_phrases_words_miss() {
        let a = [
            "an excellent choice for tonight",
            "that is an excellent choice indeed",
            "excellent choice as always",
        ];
        let b = [
            "an excellent film for tonight",
            "a solid choice indeed",
            "good choice as always",
        ];
        let report = word_contrast(&a, &b, ContrastUnit::Bigram, 5);
        assert_eq!(report.side_a[0].token, "excellent choice");
        assert_eq!(report.side_a[0].count_a, 3);
        assert_eq!(report.side_a[0].count_b, 0);
    }

    #[test]
    fn tokenization_lowercases_and_strips_punctuation() {
        let a = ["Brilliant! Simply BRILLIANT."];
        let b = ["dull, dull, dull"];
        let report = word_contrast(&a, &b, ContrastUnit::Word, 5);
        assert_eq!(report.side_a[0].token, "brilliant");
        assert_eq!(report.side_a[0].count_a, 2);
        assert_eq!(report.side_b[0].token, "dull");
    }

    #[test]
    fn dominant_token_of_a_one_sided_corpus_leans_toward_that_side() {
        // With side B empty, smoothing gives every token an equal phantom
        // share of B, so only tokens with above-baseline counts in A lean
        // toward A.
        let a = ["alpha alpha alpha beta"];
        let report = word_contrast(&a, &[], ContrastUnit::Word, 10);
        assert_eq!(report.side_a.len(), 1);
        assert_eq!(report.side_a[0].token, "alpha");
        assert_eq!(report.side_a[0].count_b, 0);
    }

    #[test]
    fn two_empty_corpora_produce_an_empty_report() {
        let report = word_contrast(&[], &[], ContrastUnit::Bigram, 10);
        assert!(report.side_a.is_empty());
        assert!(report.side_b.is_empty());
    }

    #[test]
    fn top_k_truncates_after_ranking() {
        let a = ["aa aa aa bb bb cc"];
        let b = ["zz"];
        let report = word_contrast(&a, &b, ContrastUnit::Word, 2);
        assert_eq!(report.side_a.len(), 2);
        assert_eq!(report.side_a[0].token, "aa");
        assert_eq!(report.side_a[1].token, "bb");
    }

    /// Small random documents over a tiny alphabet so collisions are common.
    fn docs() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["ax", "by", "cz", "dw"]), 1..8)
                .prop_map(|words| words.join(" ")),
            0..5,
        )
    }

    proptest! {
        /// Swapping sides mirrors the report exactly, scores negated.
        #[test]
        fn contrast_is_anti_symmetric(a in docs(), b in docs()) {
            let a_refs: Vec<&str> = a.iter().map(String::as_str).collect();
            let b_refs: Vec<&str> = b.iter().map(String::as_str).collect();
            let forward = word_contrast(&a_refs, &b_refs, ContrastUnit::Word, 100);
            let backward = word_contrast(&b_refs, &a_refs, ContrastUnit::Word, 100);
            prop_assert_eq!(forward.side_a.len(), backward.side_b.len());
            prop_assert_eq!(forward.side_b.len(), backward.side_a.len());
            for (f, b) in forward.side_a.iter().zip(&backward.side_b) {
                prop_assert_eq!(&f.token, &b.token);
                prop_assert!((f.score + b.score).abs() < 1e-12);
                prop_assert_eq!(f.count_a, b.count_b);
                prop_assert_eq!(f.count_b, b.count_a);
            }
        }

        /// Rankings never place a weaker lean above a stronger one.
        #[test]
        fn rankings_are_monotone(a in docs(), b in docs()) {
            let a_refs: Vec<&str> = a.iter().map(String::as_str).collect();
            let b_refs: Vec<&str> = b.iter().map(String::as_str).collect();
            let report = word_contrast(&a_refs, &b_refs, ContrastUnit::Word, 100);
            for pair in report.side_a.windows(2) {
                prop_assert!(pair[0].score >= pair[1].score);
            }
            for pair in report.side_b.windows(2) {
                prop_assert!(pair[0].score <= pair[1].score);
            }
        }
    }
}
