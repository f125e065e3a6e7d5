//! Keyword-based ground truth for concept references.
//!
//! Judge labels say what a model *claimed* about an item; reference texts
//! (scripts, full book text) say what is actually there. This module scans
//! each item's reference text for a concept's keyword list and freezes the
//! result as [`GroundTruth`] records, giving two things:
//!
//! * **prevalence** — what fraction of items genuinely contain the concept,
//!   the base rate any affirmation rate must be read against;
//! * **scoring** — precision/recall/F1 of model claims ("this item has such
//!   a reference") against the scanned truth.
//!
//! Matching is Unicode-NFC-normalized, case-insensitive *substring* search:
//! `Hitlers` matches the keyword `hitler`, and a decomposed `Füh­rer` matches
//! the precomposed keyword. Substring (not word-boundary) matching is the
//! deliberate bias: for ground-truthing, a false keyword hit is reviewable,
//! a silent miss is not. Items without a reference text cannot be
//! ground-truthed and are excluded with a count, never guessed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::analytics::{prf_from_counts, PrfScore};
use crate::context::RunContext;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::store::{RecordKind, StoreRecord};

/// Stage-mark name for the keyword ground-truth pass.
pub const KEYWORD_STAGE: &str = "keyword";

/// A concept and the keywords whose presence in a reference text counts as
/// a mention of it. Keywords are stored normalized (NFC, lowercased).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSpec {
    pub concept: String,
    pub keywords: Vec<String>,
}

impl KeywordSpec {
    /// Validates and normalizes a keyword list: it must be non-empty and
    /// contain no blank entries; duplicates (after normalization) collapse.
    pub fn new(concept: impl Into<String>, keywords: Vec<String>) -> Result<Self> {
        let concept = concept.into();
        if keywords.is_empty() {
            return Err(Error::EmptyKeywords { concept });
        }
        let mut normalized = Vec::new();
        for keyword in keywords {
            let keyword = normalize(keyword.trim());
            if keyword.is_empty() {
                return Err(Error::Config {
                    detail: format!("keyword spec for `{concept}` contains a blank keyword"),
                });
            }
            if !normalized.contains(&keyword) {
                normalized.push(keyword);
            }
        }
        Ok(KeywordSpec {
            concept,
            keywords: normalized,
        })
    }

    /// Parses a TOML spec of the form:
    ///
    /// ```toml
    /// concept = "dictator"
    /// keywords = ["hitler", "führer"]
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            concept: String,
            keywords: Vec<String>,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| Error::Config {
            detail: format!("keyword spec: {e}"),
        })?;
        KeywordSpec::new(raw.concept, raw.keywords)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        KeywordSpec::from_toml_str(&text)
    }
}

/// NFC plus Unicode lowercasing — the canonical form both keywords and
/// scanned text are brought to before comparison.
fn normalize(text: &str) -> String {
    text.nfc().collect::<String>().to_lowercase()
}

/// Result of scanning one text for one concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordScan {
    pub mentioned: bool,
    /// Non-overlapping occurrences summed over all keywords.
    pub total_hits: u64,
    /// Non-overlapping occurrences per keyword (normalized form).
    pub hits: BTreeMap<String, u64>,
}

/// Scans a text for every keyword in the spec. Each keyword is counted
/// independently (two keywords may hit the same span); occurrences of one
/// keyword never overlap each other.
pub fn scan_text(spec: &KeywordSpec, text: &str) -> KeywordScan {
    let haystack = normalize(text);
    let mut hits = BTreeMap::new();
    let mut total = 0u64;
    for keyword in &spec.keywords {
        let count = haystack.match_indices(keyword.as_str()).count() as u64;
        if count > 0 {
            hits.insert(keyword.clone(), count);
            total += count;
        }
    }
    KeywordScan {
        mentioned: total > 0,
        total_hits: total,
        hits,
    }
}

/// Frozen scan result for one (item, concept) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub item_id: String,
    pub concept: String,
    pub mentioned: bool,
    pub total_hits: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hits: BTreeMap<String, u64>,
}

impl StoreRecord for GroundTruth {
    const KIND: RecordKind = RecordKind::GroundTruth;

    fn dedupe_key(&self) -> String {
        format!("{}:{}", self.item_id, self.concept)
    }
}

/// Corpus-level mention rate for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceReport {
    pub concept: String,
    /// Items whose reference text was scanned.
    pub items_scanned: usize,
    pub items_mentioning: usize,
    /// Percent of scanned items that mention the concept.
    pub prevalence_pct: f64,
    /// Items with no reference text: unknowable, excluded from the rate.
    pub items_without_reference: usize,
}

/// Scans every item with a reference text. Errors if the corpus has no
/// reference texts at all — prevalence would be 0/0.
pub fn corpus_prevalence(
    corpus: &Corpus,
    spec: &KeywordSpec,
) -> Result<(Vec<GroundTruth>, PrevalenceReport)> {
    let mut truths = Vec::new();
    let mut without_reference = 0usize;
    for item in &corpus.items {
        match corpus.reference_text(item)? {
            Some(text) => {
                let scan = scan_text(spec, &text);
                truths.push(GroundTruth {
                    item_id: item.item_id.clone(),
                    concept: spec.concept.clone(),
                    mentioned: scan.mentioned,
                    total_hits: scan.total_hits,
                    hits: scan.hits,
                });
            }
            None => without_reference += 1,
        }
    }
    if truths.is_empty() {
        return Err(Error::NoReferenceTexts {
            concept: spec.concept.clone(),
            excluded: without_reference,
        });
    }
    let mentioning = truths.iter().filter(|t| t.mentioned).count();
    let report = PrevalenceReport {
        concept: spec.concept.clone(),
        items_scanned: truths.len(),
        items_mentioning: mentioning,
        prevalence_pct: mentioning as f64 / truths.len() as f64 * 100.0,
        items_without_reference: without_reference,
    };
    Ok((truths, report))
}

/// Runs the scan over the corpus and persists the ground truth. Purely
/// local — no model is consulted — but recorded like any stage so reports
/// can depend on it.
pub fn run_keyword_truth(
    ctx: &RunContext,
    corpus: &Corpus,
    spec: &KeywordSpec,
) -> Result<PrevalenceReport> {
    let (truths, report) = corpus_prevalence(corpus, spec)?;
    for truth in &truths {
        ctx.store.append(truth)?;
    }
    ctx.store
        .mark_stage_complete(KEYWORD_STAGE, serde_json::to_value(&report)?)?;
    log::info!(
        "keyword `{}`: {}/{} items mention it ({} without reference text)",
        report.concept,
        report.items_mentioning,
        report.items_scanned,
        report.items_without_reference
    );
    Ok(report)
}

/// Loads every stored ground-truth record.
pub fn load_ground_truth(ctx: &RunContext) -> Result<Vec<GroundTruth>> {
    ctx.store.load::<GroundTruth>()
}

/// Model claims scored against scanned ground truth for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimComparison {
    pub concept: String,
    /// Claims that had a ground-truth record to compare against.
    pub overlap: usize,
    /// Claims about items with no ground truth (no reference text).
    pub excluded_unknown: usize,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub true_negatives: u64,
    pub score: PrfScore,
}

/// Scores per-item claims ("this item contains such a reference": `true` /
/// `false`) against the scanned truth. Positive class = reference exists.
/// Claims about unscanned items are excluded with a count; an empty overlap
/// is an error.
pub fn score_claims(
    truths: &[GroundTruth],
    claims: &[(String, bool)],
    concept: &str,
) -> Result<ClaimComparison> {
    let truth_by_item: BTreeMap<&str, bool> = truths
        .iter()
        .filter(|t| t.concept == concept)
        .map(|t| (t.item_id.as_str(), t.mentioned))
        .collect();

    let mut comparison = ClaimComparison {
        concept: concept.to_string(),
        overlap: 0,
        excluded_unknown: 0,
        true_positives: 0,
        false_positives: 0,
        false_negatives: 0,
        true_negatives: 0,
        score: prf_from_counts(0, 0, 0),
    };
    for (item_id, claimed) in claims {
        let Some(&actual) = truth_by_item.get(item_id.as_str()) else {
            comparison.excluded_unknown += 1;
            continue;
        };
        comparison.overlap += 1;
        match (claimed, actual) {
            (true, true) => comparison.true_positives += 1,
            (true, false) => comparison.false_positives += 1,
            (false, true) => comparison.false_negatives += 1,
            (false, false) => comparison.true_negatives += 1,
        }
    }
    if comparison.overlap == 0 {
        return Err(Error::EmptyScoreOverlap {
            concept: concept.to_string(),
        });
    }
    comparison.score = prf_from_counts(
        comparison.true_positives,
        comparison.false_positives,
        comparison.false_negatives,
    );
    Ok(comparison)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DomainItem, DomainKind};
    use crate::provider::{MockProvider, ProviderRouter};
    use crate::store::{RunIdentity, RunStore};
    use crate::template::TemplateSet;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn spec(keywords: &[&str]) -> KeywordSpec {
        KeywordSpec::new("dictator", keywords.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn empty_keyword_list_is_rejected() {
        let err = KeywordSpec::new("dictator", vec![]).unwrap_err();
        assert!(matches!(err, Error::EmptyKeywords { .. }));
        let err = KeywordSpec::new("dictator", vec!["  ".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn keywords_are_normalized_and_deduplicated() {
        let spec = KeywordSpec::new(
            "dictator",
            vec!["Hitler".into(), "hitler".into(), "FÜHRER".into()],
        )
        .unwrap();
        assert_eq!(spec.keywords, vec!["hitler".to_string(), "führer".to_string()]);
    }

    #[test]
    fn toml_spec_round_trips() {
        let text = "# axis of evil\nconcept = \"dictator\"\nkeywords = [\"hitler\", \"führer\", \"nazi\"]\n";
        let spec = KeywordSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.concept, "dictator");
        assert_eq!(spec.keywords.len(), 3);

        assert!(KeywordSpec::from_toml_str("concept = \"x\"").is_err());
        assert!(KeywordSpec::from_toml_str("keywords = [\"a\"]").is_err());
        assert!(KeywordSpec::from_toml_str("concept = \"x\"\nkeywords = \"a\"").is_err());
    }

    #[test]
    fn matching_is_case_insensitive_substring() {
        let spec = spec(&["hitler"]);
        let scan = scan_text(&spec, "The Hitlers of history repeat themselves.");
        assert!(scan.mentioned);
        assert_eq!(scan.total_hits, 1);

        let scan = scan_text(&spec, "HITLER! hitler? hitlerism");
        assert_eq!(scan.total_hits, 3);
    }

    #[test]
    fn decomposed_unicode_matches_precomposed_keywords() {
        let spec = spec(&["führer"]);
        // 'u' followed by a combining diaeresis, then uppercase for spite.
        let decomposed = "Der FU\u{0308}HRER spricht.";
        let scan = scan_text(&spec, decomposed);
        assert!(scan.mentioned, "NFC + lowercase must unify the forms");
        assert_eq!(scan.total_hits, 1);
    }

    #[test]
    fn occurrences_of_one_keyword_do_not_overlap() {
        let spec = spec(&["aa"]);
        let scan = scan_text(&spec, "aaaa");
        assert_eq!(scan.total_hits, 2);
    }

    #[test]
    fn keywords_are_counted_independently() {
        let spec = spec(&["nazi", "nazism"]);
        let scan = scan_text(&spec, "Nazism rose; the nazi era.");
        // "nazi" hits inside both words; "nazism" hits once.
        assert_eq!(scan.hits["nazi"], 2);
        assert_eq!(scan.hits["nazism"], 1);
        assert_eq!(scan.total_hits, 3);
    }

    fn corpus_with_refs(dir: &Path) -> Corpus {
        std::fs::write(dir.join("a.txt"), "A speech about the Führer echoes.").unwrap();
        std::fs::write(dir.join("b.txt"), "A quiet domestic drama.").unwrap();
        std::fs::write(dir.join("c.txt"), "Hitler is mentioned twice: Hitler.").unwrap();
        let item = |id: &str, reference: Option<&str>| DomainItem {
            item_id: id.into(),
            title: id.to_uppercase(),
            domain_kind: DomainKind::Movie,
            subdomain: None,
            year: None,
            reference_text_ref: reference.map(std::path::PathBuf::from),
        };
        Corpus::new(
            "films",
            vec![
                item("a", Some("a.txt")),
                item("b", Some("b.txt")),
                item("c", Some("c.txt")),
                item("d", None),
            ],
            dir,
        )
        .unwrap()
    }

    #[test]
    fn prevalence_counts_only_items_with_reference_texts() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = corpus_with_refs(dir.path());
        let spec = spec(&["hitler", "führer"]);
        let (truths, report) = corpus_prevalence(&corpus, &spec).unwrap();
        assert_eq!(truths.len(), 3);
        assert_eq!(report.items_scanned, 3);
        assert_eq!(report.items_mentioning, 2);
        assert_eq!(report.items_without_reference, 1);
        assert!((report.prevalence_pct - 200.0 / 3.0).abs() < 1e-9);

        let c = truths.iter().find(|t| t.item_id == "c").unwrap();
        assert_eq!(c.total_hits, 2);
        let b = truths.iter().find(|t| t.item_id == "b").unwrap();
        assert!(!b.mentioned);
    }

    #[test]
    fn corpus_without_any_reference_texts_cannot_be_ground_truthed() {
        let item = DomainItem {
            item_id: "x".into(),
            title: "X".into(),
            domain_kind: DomainKind::Movie,
            subdomain: None,
            year: None,
            reference_text_ref: None,
        };
        let corpus = Corpus::new("films", vec![item], ".").unwrap();
        let err = corpus_prevalence(&corpus, &spec(&["hitler"])).unwrap_err();
        match err {
            Error::NoReferenceTexts { excluded, .. } => assert_eq!(excluded, 1),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn ground_truth_persists_and_reruns_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = corpus_with_refs(dir.path());
        let identity = RunIdentity {
            corpus_digest: "c".into(),
            roster_digest: Default::default(),
            template_versions: Default::default(),
            config: serde_json::json!({}),
        };
        let store =
            Arc::new(RunStore::create_or_open(dir.path().join("runs"), "r1", identity).unwrap());
        let provider = Arc::new(
            ProviderRouter::new(store.clone(), Some(Arc::new(MockProvider::from_rules(vec![]))))
                .unwrap(),
        );
        let ctx = RunContext::new(store, provider, Arc::new(TemplateSet::builtin()), 2);

        let report = run_keyword_truth(&ctx, &corpus, &spec(&["hitler", "führer"])).unwrap();
        assert_eq!(report.items_scanned, 3);
        assert_eq!(ctx.store.count(RecordKind::GroundTruth), 3);
        assert!(ctx.store.stage_complete(KEYWORD_STAGE));

        run_keyword_truth(&ctx, &corpus, &spec(&["hitler", "führer"])).unwrap();
        assert_eq!(ctx.store.count(RecordKind::GroundTruth), 3, "dedupe held");

        let loaded = load_ground_truth(&ctx).unwrap();
        assert_eq!(loaded.len(), 3);
    }

    #[test]
    fn claims_score_against_truth_with_unknowns_excluded() {
        let truth = |item: &str, mentioned: bool| GroundTruth {
            item_id: item.into(),
            concept: "dictator".into(),
            mentioned,
            total_hits: mentioned as u64,
            hits: BTreeMap::new(),
        };
        let truths = vec![
            truth("a", true),
            truth("b", false),
            truth("c", true),
            truth("d", false),
        ];
        let claims = vec![
            ("a".to_string(), true),  // tp
            ("b".to_string(), true),  // fp
            ("c".to_string(), false), // fn
            ("d".to_string(), false), // tn
            ("ghost".to_string(), true),
        ];
        let comparison = score_claims(&truths, &claims, "dictator").unwrap();
        assert_eq!(comparison.overlap, 4);
        assert_eq!(comparison.excluded_unknown, 1);
        assert_eq!(
            (
                comparison.true_positives,
                comparison.false_positives,
                comparison.false_negatives,
                comparison.true_negatives
            ),
            (1, 1, 1, 1)
        );
        assert_eq!(comparison.score.precision, 50.0);
        assert_eq!(comparison.score.recall, 50.0);

        let err = score_claims(&truths, &[("ghost".into(), true)], "dictator").unwrap_err();
        assert!(matches!(err, Error::EmptyScoreOverlap { .. }));
    }

    proptest! {
        /// Scan counts are invariant under NFD/NFC re-encoding of the text.
        #[test]
        fn scan_is_normalization_invariant(text in "[a-zA-ZüÜö ]{0,40}") {
            let spec = spec(&["führer", "öl"]);
            let nfd: String = text.nfd().collect();
            let nfc: String = text.nfc().collect();
            prop_assert_eq!(scan_text(&spec, &nfd), scan_text(&spec, &nfc));
        }

        /// Prevalence, when defined, is always a percentage.
        #[test]
        fn claim_scores_stay_in_range(
            flags in prop::collection::vec((any::<bool>(), any::<bool>()), 1..30)
        ) {
            let truths: Vec<GroundTruth> = flags
                .iter()
                .enumerate()
                .map(|(i, (mentioned, _))| GroundTruth {
                    item_id: format!("i{i}"),
                    concept: "c".into(),
                    mentioned: *mentioned,
                    total_hits: 0,
                    hits: BTreeMap::new(),
                })
                .collect();
            let claims: Vec<(String, bool)> = flags
                .iter()
                .enumerate()
                .map(|(i, (_, claimed))| (format!("i{i}"), *claimed))
                .collect();
            let comparison = score_claims(&truths, &claims, "c").unwrap();
            prop_assert_eq!(comparison.overlap, flags.len());
            prop_assert!(comparison.score.precision <= 100.0);
            prop_assert!(comparison.score.recall <= 100.0);
            prop_assert!(comparison.score.f1 <= 100.0 + 1e-12);
        }
    }
}
