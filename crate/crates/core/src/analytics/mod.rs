//! Descriptive statistics over audit outcomes.
//!
//! Everything in this module is pure computation: inputs are plain slices and
//! count structs produced by the pipeline stages, outputs are numbers. Two
//! conventions hold throughout:
//!
//! * Rates are expressed in **percent** (0–100), agreement coefficients on
//!   their natural **[-1, 1]** scale.
//! * A ratio whose denominator is zero is *undefined*, never silently zero.
//!   Undefined values surface as `None` (or as an explicit `*_defined` flag on
//!   [`PrfScore`], where a placeholder number is still needed for tabulation).

mod agreement;
mod contrast;

pub use agreement::{cohen_kappa, fleiss_kappa, AgreementInput, FleissResult};
pub use contrast::{word_contrast, ContrastReport, ContrastToken, ContrastUnit};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::verification::{CellCounts, Verdict, VerdictValue};

/// Percentage of resolved verdicts that were correct, with abstentions
/// ("I don't know") removed from the denominator:
/// `correct / (correct + incorrect)`.
///
/// Returns `None` when the verifier abstained on everything (or saw nothing),
/// since the ratio is undefined there.
pub fn accuracy_excluding_idk(cell: &CellCounts) -> Option<f64> {
    let denom = cell.correct + cell.incorrect;
    if denom == 0 {
        return None;
    }
    Some(cell.correct as f64 / denom as f64 * 100.0)
}

/// Percentage of *all* verdicts that were correct, with abstentions counted
/// against the verifier: `correct / (correct + incorrect + abstain)`.
///
/// Returns `None` for an empty cell.
pub fn accuracy_including_idk(cell: &CellCounts) -> Option<f64> {
    let denom = cell.total();
    if denom == 0 {
        return None;
    }
    Some(cell.correct as f64 / denom as f64 * 100.0)
}

/// Precision/recall/F1 triple, in percent.
///
/// `precision_defined` / `recall_defined` record whether the underlying
/// denominator was non-zero; when a flag is `false` the corresponding value is
/// `0.0` purely as a tabulation placeholder and must not be read as a score.
/// F1 is `0.0` whenever precision and recall are both zero or either is
/// undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

/// Computes precision, recall and F1 from raw confusion counts.
///
/// `tp` = true positives, `fp` = false positives, `fn_` = false negatives.
/// F1 is the harmonic mean `2PR / (P + R)`; being scale-invariant it comes out
/// in percent too.
pub fn prf_from_counts(tp: u64, fp: u64, fn_: u64) -> PrfScore {
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fn_ > 0;
    let precision = if precision_defined {
        tp as f64 / (tp + fp) as f64 * 100.0
    } else {
        0.0
    };
    let recall = if recall_defined {
        tp as f64 / (tp + fn_) as f64 * 100.0
    } else {
        0.0
    };
    let f1 = if precision_defined && recall_defined && precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrfScore {
        precision,
        recall,
        f1,
        precision_defined,
        recall_defined,
    }
}

/// How often a verifier abstained, per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdkRate {
    pub model_key: String,
    /// Percent of this verifier's verdicts that were "I don't know".
    pub idk_pct: f64,
    /// Percent of this verifier's verdicts that were flagged as hedged or
    /// unparseable (a subset of scoring anomalies, not of abstentions).
    pub flagged_pct: f64,
    pub verdicts: u64,
}

/// Abstention rates per verifier, sorted by rate ascending (ties broken by
/// model key) so the most decisive verifiers list first. Verifiers with no
/// verdicts are omitted rather than reported as 0%.
pub fn idk_rates(verdicts: &[Verdict]) -> Vec<IdkRate> {
    let mut totals: BTreeMap<&str, (u64, u64, u64)> = BTreeMap::new();
    for v in verdicts {
        let entry = totals.entry(v.verifier_model_key.as_str()).or_default();
        entry.0 += 1;
        if v.value == VerdictValue::AbstainIdk {
            entry.1 += 1;
        }
        if v.flagged {
            entry.2 += 1;
        }
    }
    let mut rates: Vec<IdkRate> = totals
        .into_iter()
        .map(|(key, (total, idk, flagged))| IdkRate {
            model_key: key.to_string(),
            idk_pct: idk as f64 / total as f64 * 100.0,
            flagged_pct: flagged as f64 / total as f64 * 100.0,
            verdicts: total,
        })
        .collect();
    rates.sort_by(|a, b| {
        a.idk_pct
            .partial_cmp(&b.idk_pct)
            .expect("idk_pct is never NaN")
            .then_with(|| a.model_key.cmp(&b.model_key))
    });
    rates
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(correct: u64, incorrect: u64, abstain: u64) -> CellCounts {
        CellCounts {
            correct,
            incorrect,
            abstain,
            flagged: 0,
        }
    }

    #[test]
    fn accuracy_conventions_differ_only_in_denominator() {
        let c = cell(6, 2, 2);
        assert_eq!(accuracy_excluding_idk(&c), Some(75.0));
        assert_eq!(accuracy_including_idk(&c), Some(60.0));
    }

    #[test]
    fn all_abstentions_leave_excluding_convention_undefined() {
        let c = cell(0, 0, 5);
        assert_eq!(accuracy_excluding_idk(&c), None);
        assert_eq!(accuracy_including_idk(&c), Some(0.0));
    }

    #[test]
    fn empty_cell_is_undefined_under_both_conventions() {
        let c = cell(0, 0, 0);
        assert_eq!(accuracy_excluding_idk(&c), None);
        assert_eq!(accuracy_including_idk(&c), None);
    }

    #[test]
    fn prf_matches_hand_computation() {
        // 33 hits, 37 spurious, 82 missed.
        let score = prf_from_counts(33, 37, 82);
        assert!((score.precision - 47.142857).abs() < 1e-4);
        assert!((score.recall - 28.695652).abs() < 1e-4);
        // Exact F1 is 2 * 33 / (70 + 115) = 66/185.
        assert!((score.f1 - 100.0 * 66.0 / 185.0).abs() < 1e-9);
        assert!(score.precision_defined && score.recall_defined);
    }

    #[test]
    fn prf_flags_undefined_denominators_instead_of_zeroing() {
        let no_positives = prf_from_counts(0, 0, 4);
        assert!(!no_positives.precision_defined);
        assert!(no_positives.recall_defined);
        assert_eq!(no_positives.recall, 0.0);
        assert_eq!(no_positives.f1, 0.0);

        let no_truth = prf_from_counts(0, 3, 0);
        assert!(no_truth.precision_defined);
        assert!(!no_truth.recall_defined);
    }

    #[test]
    fn perfect_counts_give_perfect_scores() {
        let score = prf_from_counts(10, 0, 0);
        assert_eq!(score.precision, 100.0);
        assert_eq!(score.recall, 100.0);
        assert_eq!(score.f1, 100.0);
    }

    fn verdict(verifier: &str, value: VerdictValue, flagged: bool) -> Verdict {
        Verdict {
            assertion_id: "a".into(),
            verifier_model_key: verifier.into(),
            value,
            flagged,
            raw_exchange_ref: "x".into(),
        }
    }

    #[test]
    fn idk_rates_sort_most_decisive_first() {
        let verdicts = vec![
            verdict("hedger", VerdictValue::AbstainIdk, true),
            verdict("hedger", VerdictValue::AffirmTrue, false),
            verdict("decisive", VerdictValue::AffirmTrue, false),
            verdict("decisive", VerdictValue::AffirmFalse, false),
        ];
        let rates = idk_rates(&verdicts);
        assert_eq!(rates.len(), 2);
        assert_eq!(rates[0].model_key, "decisive");
        assert_eq!(rates[0].idk_pct, 0.0);
        assert_eq!(rates[1].model_key, "hedger");
        assert_eq!(rates[1].idk_pct, 50.0);
        assert_eq!(rates[1].flagged_pct, 50.0);
        assert_eq!(rates[1].verdicts, 2);
    }

    #[test]
    fn idk_rates_on_empty_input_are_empty() {
        assert!(idk_rates(&[]).is_empty());
    }

    proptest! {
        /// F1 always satisfies the harmonic-mean identity when defined.
        #[test]
        fn f1_is_harmonic_mean(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let s = prf_from_counts(tp, fp, fn_);
            if s.precision_defined && s.recall_defined && s.precision + s.recall > 0.0 {
                let expect = 2.0 * s.precision * s.recall / (s.precision + s.recall);
                prop_assert!((s.f1 - expect).abs() < 1e-9);
            } else {
                prop_assert_eq!(s.f1, 0.0);
            }
        }

        /// Counting abstentions against the verifier can only lower accuracy.
        #[test]
        fn including_idk_never_raises_accuracy(
            correct in 0u64..200, incorrect in 0u64..200, abstain in 0u64..200,
        ) {
            let c = cell(correct, incorrect, abstain);
            if let (Some(excl), Some(incl)) =
                (accuracy_excluding_idk(&c), accuracy_including_idk(&c))
            {
                prop_assert!(incl <= excl + 1e-12);
            }
        }
    }
}
