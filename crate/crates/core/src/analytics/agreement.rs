//! Chance-corrected inter-rater agreement.
//!
//! Two coefficients cover the two shapes of rating data the pipeline
//! produces: [`cohen_kappa`] for exactly two raters over the same units, and
//! [`fleiss_kappa`] for any fixed panel of raters. Both return `None` (rather
//! than NaN or a fabricated number) when expected agreement is total and the
//! correction is undefined, except in the one benign case where observed
//! agreement is also total — identical ratings score `1.0`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Cohen's kappa between two raters who labelled the same units in order.
///
/// Expected agreement uses the raters' marginal label distributions. Labels
/// can be any ordered type; the category set is whatever actually occurs.
///
/// Errors on ratings of different lengths or on empty input. Returns
/// `Ok(None)` when chance agreement is 1 but the raters still disagree
/// somewhere (undefined correction); `Ok(Some(1.0))` when both raters agree
/// everywhere with degenerate marginals.
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::RaterLengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput {
            detail: "agreement ratings".into(),
        });
    }
    let n = a.len() as f64;
    let mut marginal_a: BTreeMap<&T, u64> = BTreeMap::new();
    let mut marginal_b: BTreeMap<&T, u64> = BTreeMap::new();
    let mut agreements = 0u64;
    for (left, right) in a.iter().zip(b) {
        *marginal_a.entry(left).or_default() += 1;
        *marginal_b.entry(right).or_default() += 1;
        if left == right {
            agreements += 1;
        }
    }
    let observed = agreements as f64 / n;
    let expected: f64 = marginal_a
        .iter()
        .map(|(label, &count_a)| {
            let count_b = marginal_b.get(label).copied().unwrap_or(0);
            (count_a as f64 / n) * (count_b as f64 / n)
        })
        .sum();
    Ok(chance_corrected(observed, expected))
}

/// Ratings for a fixed panel of raters over a set of units, collected
/// incrementally. Units missing a rating from any panel member are dropped
/// (with a count) by [`fleiss_kappa`] rather than skewing the per-unit
/// agreement term.
#[derive(Debug, Clone)]
pub struct AgreementInput<T: Ord + Clone> {
    raters: Vec<String>,
    labels: BTreeMap<String, BTreeMap<String, T>>,
}

impl<T: Ord + Clone> AgreementInput<T> {
    /// A panel with the given rater keys. Order does not matter; duplicates
    /// are collapsed.
    pub fn new<S: Into<String>>(raters: impl IntoIterator<Item = S>) -> Self {
        let mut raters: Vec<String> = raters.into_iter().map(Into::into).collect();
        raters.sort();
        raters.dedup();
        AgreementInput {
            raters,
            labels: BTreeMap::new(),
        }
    }

    /// Records one rating. Ratings from raters outside the panel are ignored;
    /// a repeated (unit, rater) pair keeps the latest label.
    pub fn add(&mut self, unit: &str, rater: &str, label: T) {
        if self.raters.iter().any(|r| r == rater) {
            self.labels
                .entry(unit.to_string())
                .or_default()
                .insert(rater.to_string(), label);
        }
    }

    pub fn rater_count(&self) -> usize {
        self.raters.len()
    }
}

/// Outcome of a Fleiss computation, including how much input survived the
/// completeness requirement.
#[derive(Debug, Clone, PartialEq)]
pub struct FleissResult {
    /// `None` when the correction is undefined (all ratings in one category
    /// would make it 1.0 instead, since observed agreement is also total).
    pub kappa: Option<f64>,
    pub units_used: usize,
    pub units_dropped: usize,
}

/// Fleiss' kappa for a panel of `n >= 2` raters.
///
/// Only units rated by the *entire* panel enter the computation; the rest are
/// reported in `units_dropped`. Errors if the panel has fewer than two raters
/// or no unit survives the completeness filter.
pub fn fleiss_kappa<T: Ord + Clone>(input: &AgreementInput<T>) -> Result<FleissResult> {
    let n = input.raters.len();
    if n < 2 {
        return Err(Error::InsufficientRaters { needed: 2, got: n });
    }
    let complete: Vec<&BTreeMap<String, T>> = input
        .labels
        .values()
        .filter(|ratings| ratings.len() == n)
        .collect();
    let units_dropped = input.labels.len() - complete.len();
    if complete.is_empty() {
        return Err(Error::EmptyInput {
            detail: "fully rated units".into(),
        });
    }

    // Per-unit category counts.
    let unit_counts: Vec<BTreeMap<&T, u64>> = complete
        .iter()
        .map(|ratings| {
            let mut counts: BTreeMap<&T, u64> = BTreeMap::new();
            for label in ratings.values() {
                *counts.entry(label).or_default() += 1;
            }
            counts
        })
        .collect();

    let units = unit_counts.len() as f64;
    let raters = n as f64;
    let observed = unit_counts
        .iter()
        .map(|counts| {
            let pairs: u64 = counts.values().map(|&c| c * c).sum::<u64>() - n as u64;
            pairs as f64 / (raters * (raters - 1.0))
        })
        .sum::<f64>()
        / units;

    let mut category_totals: BTreeMap<&T, u64> = BTreeMap::new();
    for counts in &unit_counts {
        for (label, &count) in counts {
            *category_totals.entry(label).or_default() += count;
        }
    }
    let expected = category_totals
        .values()
        .map(|&total| {
            let p = total as f64 / (units * raters);
            p * p
        })
        .sum::<f64>();

    Ok(FleissResult {
        kappa: chance_corrected(observed, expected),
        units_used: complete.len(),
        units_dropped,
    })
}

/// `(observed - expected) / (1 - expected)` with the degenerate-marginals
/// edge handled explicitly: when expected agreement is (numerically) total,
/// the coefficient is 1.0 if observed agreement is also total and undefined
/// otherwise.
fn chance_corrected(observed: f64, expected: f64) -> Option<f64> {
    if (1.0 - expected).abs() < 1e-12 {
        if (1.0 - observed).abs() < 1e-12 {
            return Some(1.0);
        }
        return None;
    }
    Some((observed - expected) / (1.0 - expected))
}
