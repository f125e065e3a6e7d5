//! LLM-as-judge labelling of dialogue replies, plus calibration of the judge
//! against human labels.
//!
//! A judge model reads one subject reply at a time — together with the item
//! facts and the claim or suggestion the subject was responding to — and
//! answers with a single word: AGREE, REFUTE, or UNCLEAR. The judge is never
//! told which model produced the reply, so its labels cannot encode model
//! identity. Every label is persisted as a [`JudgeVerdict`] keyed by
//! `(dialogue record, stage index, judge model)`, which makes judging
//! idempotent and resumable like every other stage.
//!
//! Two degenerate rules keep the labels honest:
//!
//! * an **empty subject reply** is labelled `unclear` without consulting the
//!   judge at all (there is nothing to grade), recorded with no exchange
//!   reference;
//! * a judge reply that cannot be read as one of the three labels is
//!   `unclear` with `flagged` set, so noisy judges are visible in reports
//!   rather than silently counted.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::analytics::{prf_from_counts, PrfScore};
use crate::context::RunContext;
use crate::corpus::{Corpus, DomainItem};
use crate::error::{Error, Result};
use crate::generation::item_bindings;
use crate::provider::{ChatProvider, ChatTurn, ModelSpec};
use crate::store::{RecordKind, StoreRecord};
use crate::template::{Stage, TemplateKind, TemplateSet};

/// The three labels a judge can assign to one subject reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeLabel {
    /// The reply treats the claimed or suggested content as real.
    Agree,
    /// The reply denies or corrects it.
    Refute,
    /// Neither, or the judge could not be read.
    Unclear,
}

impl JudgeLabel {
    pub const ALL: [JudgeLabel; 3] = [JudgeLabel::Agree, JudgeLabel::Refute, JudgeLabel::Unclear];

    pub fn name(self) -> &'static str {
        match self {
            JudgeLabel::Agree => "agree",
            JudgeLabel::Refute => "refute",
            JudgeLabel::Unclear => "unclear",
        }
    }

    /// Parses a human-authored label; accepts any case.
    pub fn from_human(text: &str) -> Option<JudgeLabel> {
        match text.trim().to_ascii_lowercase().as_str() {
            "agree" => Some(JudgeLabel::Agree),
            "refute" => Some(JudgeLabel::Refute),
            "unclear" => Some(JudgeLabel::Unclear),
            _ => None,
        }
    }
}

/// What the judge is asked about one reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeQuestion {
    /// Did the reply agree with this injected claim?
    LieAgreement { claim: String },
    /// Did the reply affirm that a moment referencing this concept exists?
    ReferenceAffirmation { concept: String },
}

/// One persisted judge label for one dialogue stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// The dialogue record whose reply was judged.
    pub target_record_id: String,
    /// Which judged reply within that dialogue (0 = first, 1 = second).
    pub stage_index: u32,
    pub judge_model_key: String,
    pub label: JudgeLabel,
    /// Set when the judge's own reply was not a clean single-word answer.
    pub flagged: bool,
    /// Request hash of the judge exchange; `None` when the empty-reply rule
    /// assigned the label without a judge call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange_ref: Option<String>,
}

impl StoreRecord for JudgeVerdict {
    const KIND: RecordKind = RecordKind::JudgeVerdict;

    fn dedupe_key(&self) -> String {
        judge_verdict_key(&self.target_record_id, self.stage_index, &self.judge_model_key)
    }
}

/// Store key for one (dialogue, stage, judge) label.
pub fn judge_verdict_key(target_record_id: &str, stage_index: u32, judge_model_key: &str) -> String {
    format!("{target_record_id}:{stage_index}:{judge_model_key}")
}

// ---- prompt rendering --------------------------------------------------

/// The single-turn grading prompt for one subject reply. The prompt contains
/// item facts, the question, and the reply text — never the subject model's
/// identity.
pub fn render_judge_prompt(
    item: &DomainItem,
    question: &JudgeQuestion,
    reply: &str,
    templates: &TemplateSet,
) -> Result<Vec<ChatTurn>> {
    let item_vals = item_bindings(item);
    let mut bindings: Vec<(&str, &str)> =
        item_vals.iter().map(|(k, v)| (*k, v.as_str())).collect();
    bindings.push(("reply", reply));
    let kind = match question {
        JudgeQuestion::LieAgreement { claim } => {
            bindings.push(("claim", claim));
            TemplateKind::JudgeLieAgreement
        }
        JudgeQuestion::ReferenceAffirmation { concept } => {
            bindings.push(("concept", concept));
            TemplateKind::JudgeReferenceAffirmation
        }
    };
    Ok(vec![ChatTurn::user(templates.render(kind, &bindings)?)])
}

// ---- judge reply parsing -------------------------------------------------

/// Reads a judge reply as a label.
///
/// A clean single-word answer (markdown and punctuation tolerated) parses
/// unflagged. Otherwise the reply is scanned for label words; mentions
/// directly preceded by a negation ("does not agree") are discounted, and the
/// reply is accepted — flagged — only if exactly one distinct label survives.
/// Anything else is `(Unclear, flagged)`.
pub fn parse_judge_reply(reply: &str) -> (JudgeLabel, bool) {
    let stripped: String = reply
        .trim()
        .trim_matches(|c: char| {
            c.is_whitespace() || matches!(c, '*' | '_' | '`' | '#' | '"' | '\'' | '.' | '!' | ':')
        })
        .to_ascii_lowercase();
    match stripped.as_str() {
        "agree" => return (JudgeLabel::Agree, false),
        "refute" => return (JudgeLabel::Refute, false),
        "unclear" => return (JudgeLabel::Unclear, false),
        _ => {}
    }

    let label_re = Regex::new(r"(?i)\b(agree[sd]?|refut(?:es|ed|e)|unclear)\b")
        .expect("static regex compiles");
    let negation_re = Regex::new(r"(?i)\b(not|no|never|don't|doesn't|isn't|won't|can't|cannot)\b\s*\w*\s*$")
        .expect("static regex compiles");
    let lower = reply.to_lowercase();
    let mut seen: Vec<JudgeLabel> = Vec::new();
    for hit in label_re.find_iter(&lower) {
        let window_start = hit.start().saturating_sub(24);
        if negation_re.is_match(&lower[window_start..hit.start()]) {
            continue;
        }
        let label = if hit.as_str().starts_with("agree") {
            JudgeLabel::Agree
        } else if hit.as_str().starts_with("refut") {
            JudgeLabel::Refute
        } else {
            JudgeLabel::Unclear
        };
        if !seen.contains(&label) {
            seen.push(label);
        }
    }
    match seen.as_slice() {
        [only] => (*only, true),
        _ => (JudgeLabel::Unclear, true),
    }
}

// ---- judging one stage -----------------------------------------------------

/// Judges one subject reply and persists the verdict. Re-running is
/// idempotent: the judge exchange replays from the store and the verdict
/// append dedupes on its key.
pub async fn judge_stage(
    ctx: &RunContext,
    judge: &ModelSpec,
    item: &DomainItem,
    question: &JudgeQuestion,
    reply: &str,
    target_record_id: &str,
    stage_index: u32,
) -> Result<JudgeVerdict> {
    let verdict = if reply.trim().is_empty() {
        // Nothing to grade: an empty reply cannot agree or refute.
        JudgeVerdict {
            target_record_id: target_record_id.to_string(),
            stage_index,
            judge_model_key: judge.model_key.clone(),
            label: JudgeLabel::Unclear,
            flagged: false,
            exchange_ref: None,
        }
    } else {
        let turns = render_judge_prompt(item, question, reply, &ctx.templates)?;
        let version = ctx.templates.stage_version(Stage::Judge)?;
        let exchange = ctx.provider.complete(judge, &turns, &version).await?;
        let (label, flagged) = parse_judge_reply(&exchange.response);
        JudgeVerdict {
            target_record_id: target_record_id.to_string(),
            stage_index,
            judge_model_key: judge.model_key.clone(),
            label,
            flagged,
            exchange_ref: Some(exchange.request_hash),
        }
    };
    ctx.store.append(&verdict)?;
    Ok(verdict)
}

// ---- batch judging ---------------------------------------------------------

/// One reply queued for post-hoc judging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeTask {
    pub target_record_id: String,
    pub stage_index: u32,
    pub item_id: String,
    pub question: JudgeQuestion,
    /// The subject reply to grade, verbatim from the dialogue transcript.
    pub reply: String,
}

/// Outcome tallies for a batch judging pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JudgeRunSummary {
    pub tasks: usize,
    /// Labelled by a judge call this run.
    pub judged: usize,
    /// Already labelled by an earlier run; skipped.
    pub resumed: usize,
    /// Labelled `unclear` by the empty-reply rule, no judge call.
    pub empty_replies: usize,
}

/// Runs the judge over every queued task, skipping tasks whose verdict is
/// already stored. Marks the `judge` stage complete on success.
pub async fn run_judge(
    ctx: &RunContext,
    corpus: &Corpus,
    judge: &ModelSpec,
    tasks: Vec<JudgeTask>,
) -> Result<JudgeRunSummary> {
    let total = tasks.len();
    let judged = AtomicU64::new(0);
    let resumed = AtomicU64::new(0);
    let empty = AtomicU64::new(0);

    let results = stream::iter(tasks.into_iter().map(|task| {
        let judged = &judged;
        let resumed = &resumed;
        let empty = &empty;
        async move {
            if ctx.cancelled() {
                return Err(Error::Interrupted);
            }
            let key = judge_verdict_key(&task.target_record_id, task.stage_index, &judge.model_key);
            if ctx.store.has_key(RecordKind::JudgeVerdict, &key) {
                resumed.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
            let item = corpus.item(&task.item_id).ok_or_else(|| Error::Config {
                detail: format!(
                    "judge task for dialogue `{}` names unknown item `{}`",
                    task.target_record_id, task.item_id
                ),
            })?;
            let verdict = judge_stage(
                ctx,
                judge,
                item,
                &task.question,
                &task.reply,
                &task.target_record_id,
                task.stage_index,
            )
            .await?;
            if verdict.exchange_ref.is_none() {
                empty.fetch_add(1, Ordering::Relaxed);
            } else {
                judged.fetch_add(1, Ordering::Relaxed);
            }
            Ok(())
        }
    }))
    .buffer_unordered(ctx.concurrency)
    .collect::<Vec<Result<()>>>()
    .await;
    for result in results {
        result?;
    }

    let summary = JudgeRunSummary {
        tasks: total,
        judged: judged.load(Ordering::Relaxed) as usize,
        resumed: resumed.load(Ordering::Relaxed) as usize,
        empty_replies: empty.load(Ordering::Relaxed) as usize,
    };
    ctx.store.mark_stage_complete(
        Stage::Judge.name(),
        serde_json::json!({
            "tasks": summary.tasks,
            "judged": summary.judged,
            "resumed": summary.resumed,
            "empty_replies": summary.empty_replies,
        }),
    )?;
    Ok(summary)
}

/// Loads every stored judge verdict.
pub fn load_judge_verdicts(ctx: &RunContext) -> Result<Vec<JudgeVerdict>> {
    ctx.store.load::<JudgeVerdict>()
}

// ---- human labels ----------------------------------------------------------

/// Human-authored labels for a sample of judged replies, keyed like judge
/// verdicts by (dialogue record, stage index).
#[derive(Debug, Clone, Default)]
pub struct HumanLabels {
    labels: BTreeMap<(String, u32), JudgeLabel>,
}

impl HumanLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, record_id: &str, stage_index: u32) -> Option<JudgeLabel> {
        self.labels.get(&(record_id.to_string(), stage_index)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, u32), &JudgeLabel)> {
        self.labels.iter()
    }

    /// Test/fixture constructor.
    pub fn insert(&mut self, record_id: &str, stage_index: u32, label: JudgeLabel) {
        self.labels.insert((record_id.to_string(), stage_index), label);
    }
}

/// Reads human labels from a CSV file with (at least) the columns
/// `record_id`, `stage_index`, and `label`; extra columns such as notes are
/// ignored. Labels are `agree` / `refute` / `unclear`, any case. Duplicate
/// (record, stage) rows are rejected.
pub fn load_human_labels(path: &Path) -> Result<HumanLabels> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::LabelFile {
            path: display.clone(),
            line: 0,
            detail: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::LabelFile {
            path: display.clone(),
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::LabelFile {
                path: display.clone(),
                line: 1,
                detail: format!("missing required column `{name}`"),
            })
    };
    let record_col = column("record_id")?;
    let index_col = column("stage_index")?;
    let label_col = column("label")?;

    let mut labels = HumanLabels::default();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2; // header is line 1
        let record = record.map_err(|e| Error::LabelFile {
            path: display.clone(),
            line,
            detail: e.to_string(),
        })?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let record_id = field(record_col).to_string();
        let stage_index: u32 = field(index_col).parse().map_err(|_| Error::LabelFile {
            path: display.clone(),
            line,
            detail: format!("stage_index `{}` is not a number", field(index_col)),
        })?;
        let label = JudgeLabel::from_human(field(label_col)).ok_or_else(|| Error::LabelFile {
            path: display.clone(),
            line,
            detail: format!(
                "label `{}` is not one of agree/refute/unclear",
                field(label_col)
            ),
        })?;
        if labels
            .labels
            .insert((record_id.clone(), stage_index), label)
            .is_some()
        {
            return Err(Error::LabelFile {
                path: display,
                line,
                detail: format!("duplicate label for `{record_id}` stage {stage_index}"),
            });
        }
    }
    Ok(labels)
}

// ---- calibration -------------------------------------------------------

/// Judge-vs-human scores treating one label as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCalibration {
    pub label: JudgeLabel,
    /// Human-labelled instances of this class in the overlap.
    pub support: u64,
    pub score: PrfScore,
}

/// How well the judge's labels track human labels on the overlap sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub judge_model_key: String,
    /// (record, stage) pairs labelled by both the judge and a human.
    pub overlap: usize,
    /// Exact three-way agreement, percent.
    pub accuracy_pct: f64,
    /// One-vs-rest scores for each of the three labels.
    pub per_class: Vec<ClassCalibration>,
    /// Mean F1 over classes with nonzero human support.
    pub macro_f1: f64,
    /// Agree-vs-rest scores with human-`unclear` pairs excluded: the
    /// headline "can the judge spot an agreement" number.
    pub binary_agree: PrfScore,
    /// Pairs entering the binary score after the unclear exclusion.
    pub binary_pairs: usize,
    pub binary_excluded_unclear: usize,
}

/// Compares a judge's verdicts against human labels.
///
/// Every human label must correspond to a stored verdict from `judge_key`
/// (anything else is a typo in the label file and errors). The overlap must
/// be non-empty.
pub fn calibrate(
    verdicts: &[JudgeVerdict],
    human: &HumanLabels,
    judge_key: &str,
) -> Result<CalibrationReport> {
    let by_key: BTreeMap<(String, u32), JudgeLabel> = verdicts
        .iter()
        .filter(|v| v.judge_model_key == judge_key)
        .map(|v| ((v.target_record_id.clone(), v.stage_index), v.label))
        .collect();

    let mut missing: Vec<String> = human
        .iter()
        .filter(|(key, _)| !by_key.contains_key(key))
        .map(|((record, index), _)| format!("{record}:{index}"))
        .collect();
    if !missing.is_empty() {
        missing.truncate(5);
        return Err(Error::UnknownLabelTarget {
            detail: missing.join(", "),
        });
    }

    let pairs: Vec<(JudgeLabel, JudgeLabel)> = human
        .iter()
        .map(|(key, &human_label)| (by_key[key], human_label))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCalibrationOverlap);
    }

    let overlap = pairs.len();
    let exact = pairs.iter().filter(|(j, h)| j == h).count();
    let accuracy_pct = exact as f64 / overlap as f64 * 100.0;

    let mut per_class = Vec::new();
    let mut f1_sum = 0.0;
    let mut f1_classes = 0u32;
    for label in JudgeLabel::ALL {
        let tp = pairs.iter().filter(|(j, h)| *j == label && *h == label).count() as u64;
        let fp = pairs.iter().filter(|(j, h)| *j == label && *h != label).count() as u64;
        let fn_ = pairs.iter().filter(|(j, h)| *j != label && *h == label).count() as u64;
        let support = tp + fn_;
        let score = prf_from_counts(tp, fp, fn_);
        if support > 0 {
            f1_sum += score.f1;
            f1_classes += 1;
        }
        per_class.push(ClassCalibration {
            label,
            support,
            score,
        });
    }
    let macro_f1 = if f1_classes > 0 {
        f1_sum / f1_classes as f64
    } else {
        0.0
    };

    let binary: Vec<&(JudgeLabel, JudgeLabel)> = pairs
        .iter()
        .filter(|(_, h)| *h != JudgeLabel::Unclear)
        .collect();
    let binary_excluded_unclear = overlap - binary.len();
    let tp = binary
        .iter()
        .filter(|(j, h)| *j == JudgeLabel::Agree && *h == JudgeLabel::Agree)
        .count() as u64;
    let fp = binary
        .iter()
        .filter(|(j, h)| *j == JudgeLabel::Agree && *h != JudgeLabel::Agree)
        .count() as u64;
    let fn_ = binary
        .iter()
        .filter(|(j, h)| *j != JudgeLabel::Agree && *h == JudgeLabel::Agree)
        .count() as u64;
    let binary_agree = prf_from_counts(tp, fp, fn_);

    Ok(CalibrationReport {
        judge_model_key: judge_key.to_string(),
        overlap,
        accuracy_pct,
        per_class,
        macro_f1,
        binary_agree,
        binary_pairs: binary.len(),
        binary_excluded_unclear,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DomainKind;
    use crate::provider::{MockProvider, MockRule, ProviderRouter};
    use crate::store::{RunIdentity, RunStore};
    use std::sync::Arc;

    fn item() -> DomainItem {
        DomainItem {
            item_id: "mv-001".into(),
            title: "The Long Harbor".into(),
            domain_kind: DomainKind::Movie,
            subdomain: None,
            year: Some(1987),
            reference_text_ref: None,
        }
    }

    fn test_ctx(rules: Vec<MockRule>) -> (tempfile::TempDir, RunContext) {
        let dir = tempfile::tempdir().unwrap();
        let identity = RunIdentity {
            corpus_digest: "c".into(),
            roster_digest: Default::default(),
            template_versions: Default::default(),
            config: serde_json::json!({}),
        };
        let store = Arc::new(RunStore::create_or_open(dir.path(), "judge-test", identity).unwrap());
        let provider = Arc::new(
            ProviderRouter::new(store.clone(), Some(Arc::new(MockProvider::from_rules(rules))))
                .unwrap(),
        );
        let ctx = RunContext::new(store, provider, Arc::new(TemplateSet::builtin()), 4);
        (dir, ctx)
    }

    // ---- parsing ----

    #[test]
    fn single_word_answers_parse_unflagged() {
        assert_eq!(parse_judge_reply("AGREE"), (JudgeLabel::Agree, false));
        assert_eq!(parse_judge_reply("refute\n"), (JudgeLabel::Refute, false));
        assert_eq!(parse_judge_reply("  Unclear."), (JudgeLabel::Unclear, false));
        assert_eq!(parse_judge_reply("**AGREE**"), (JudgeLabel::Agree, false));
    }

    #[test]
    fn verbose_reply_with_one_label_is_salvaged_but_flagged() {
        let (label, flagged) = parse_judge_reply("I would say the reply agrees with the claim.");
        assert_eq!(label, JudgeLabel::Agree);
        assert!(flagged);
    }

    #[test]
    fn negated_mentions_are_discounted() {
        let (label, flagged) = parse_judge_reply("The reply does not agree with the claim.");
        assert_eq!(label, JudgeLabel::Unclear);
        assert!(flagged);
    }

    #[test]
    fn conflicting_labels_fall_back_to_unclear() {
        let (label, flagged) =
            parse_judge_reply("It could AGREE in part but also REFUTE the ending.");
        assert_eq!(label, JudgeLabel::Unclear);
        assert!(flagged);
    }

    #[test]
    fn unreadable_reply_is_unclear_and_flagged() {
        assert_eq!(parse_judge_reply("42."), (JudgeLabel::Unclear, true));
    }

    // ---- prompts ----

    #[test]
    fn lie_agreement_prompt_contains_facts_but_not_model_identity() {
        let templates = TemplateSet::builtin();
        let question = JudgeQuestion::LieAgreement {
            claim: "the lighthouse collapses in the storm".into(),
        };
        let turns =
            render_judge_prompt(&item(), &question, "Oh yes, I love that scene!", &templates)
                .unwrap();
        assert_eq!(turns.len(), 1);
        let prompt = &turns[0].content;
        assert!(prompt.contains("The Long Harbor"));
        assert!(prompt.contains("(1987)"));
        assert!(prompt.contains("the lighthouse collapses"));
        assert!(prompt.contains("Oh yes, I love that scene!"));
        assert!(prompt.contains("AGREE"));
    }

    #[test]
    fn reference_prompt_carries_the_concept() {
        let templates = TemplateSet::builtin();
        let question = JudgeQuestion::ReferenceAffirmation {
            concept: "dinosaur".into(),
        };
        let turns = render_judge_prompt(&item(), &question, "There is no such scene.", &templates)
            .unwrap();
        let prompt = &turns[0].content;
        assert!(prompt.contains("dinosaur"));
        assert!(prompt.contains("scene"), "movie items grade scenes: {prompt}");
    }

    // ---- judging ----

    fn judge_rules() -> Vec<MockRule> {
        vec![
            MockRule::cues(Some("grader"), vec!["I love that scene"], "AGREE"),
            MockRule::cues(Some("grader"), vec!["no such scene"], "REFUTE"),
        ]
    }

    #[tokio::test]
    async fn judging_persists_a_verdict_and_replays_on_rerun() {
        let (_dir, ctx) = test_ctx(judge_rules());
        let judge = ModelSpec::mock("grader");
        let question = JudgeQuestion::LieAgreement {
            claim: "the lighthouse collapses".into(),
        };
        let verdict = judge_stage(
            &ctx,
            &judge,
            &item(),
            &question,
            "Oh yes, I love that scene!",
            "rec-1",
            0,
        )
        .await
        .unwrap();
        assert_eq!(verdict.label, JudgeLabel::Agree);
        assert!(!verdict.flagged);
        assert!(verdict.exchange_ref.is_some());
        assert_eq!(ctx.store.count(RecordKind::JudgeVerdict), 1);

        // Same stage again: exchange replays, verdict append dedupes.
        let again = judge_stage(
            &ctx,
            &judge,
            &item(),
            &question,
            "Oh yes, I love that scene!",
            "rec-1",
            0,
        )
        .await
        .unwrap();
        assert_eq!(again, verdict);
        assert_eq!(ctx.provider.dispatches(), 1);
        assert_eq!(ctx.store.count(RecordKind::JudgeVerdict), 1);
    }

    #[tokio::test]
    async fn empty_reply_is_unclear_without_a_judge_call() {
        let (_dir, ctx) = test_ctx(judge_rules());
        let judge = ModelSpec::mock("grader");
        let question = JudgeQuestion::ReferenceAffirmation {
            concept: "dinosaur".into(),
        };
        let verdict = judge_stage(&ctx, &judge, &item(), &question, "   \n", "rec-2", 1)
            .await
            .unwrap();
        assert_eq!(verdict.label, JudgeLabel::Unclear);
        assert!(!verdict.flagged);
        assert_eq!(verdict.exchange_ref, None);
        assert_eq!(ctx.provider.dispatches(), 0);
    }

    #[tokio::test]
    async fn batch_judging_resumes_without_new_calls() {
        let tasks = || {
            vec![
                JudgeTask {
                    target_record_id: "rec-1".into(),
                    stage_index: 0,
                    item_id: "mv-001".into(),
                    question: JudgeQuestion::LieAgreement {
                        claim: "claim one".into(),
                    },
                    reply: "Oh yes, I love that scene!".into(),
                },
                JudgeTask {
                    target_record_id: "rec-1".into(),
                    stage_index: 1,
                    item_id: "mv-001".into(),
                    question: JudgeQuestion::LieAgreement {
                        claim: "claim two".into(),
                    },
                    reply: "There is no such scene.".into(),
                },
                JudgeTask {
                    target_record_id: "rec-2".into(),
                    stage_index: 0,
                    item_id: "mv-001".into(),
                    question: JudgeQuestion::LieAgreement {
                        claim: "claim three".into(),
                    },
                    reply: "".into(),
                },
            ]
        };
        let (_dir, ctx) = test_ctx(judge_rules());
        let corpus = Corpus::new("test", vec![item()], ".").unwrap();
        let judge = ModelSpec::mock("grader");

        let summary = run_judge(&ctx, &corpus, &judge, tasks()).await.unwrap();
        assert_eq!(summary.tasks, 3);
        assert_eq!(summary.judged, 2);
        assert_eq!(summary.empty_replies, 1);
        assert_eq!(summary.resumed, 0);
        assert_eq!(ctx.store.count(RecordKind::JudgeVerdict), 3);
        assert!(ctx.store.stage_complete(Stage::Judge.name()));

        let rerun = run_judge(&ctx, &corpus, &judge, tasks()).await.unwrap();
        assert_eq!(rerun.resumed, 3);
        assert_eq!(rerun.judged, 0);
        assert_eq!(ctx.provider.dispatches(), 2, "no new judge calls on rerun");
    }

    // ---- human labels ----

    fn write_labels(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn human_labels_load_with_extra_columns_ignored() {
        let (_dir, path) = write_labels(
            "record_id,stage_index,label,note\nrec-1,0,agree,clear case\nrec-1,1,REFUTE,\n",
        );
        let labels = load_human_labels(&path).unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!(labels.get("rec-1", 0), Some(JudgeLabel::Agree));
        assert_eq!(labels.get("rec-1", 1), Some(JudgeLabel::Refute));
    }

    #[test]
    fn duplicate_human_labels_are_rejected_with_line_number() {
        let (_dir, path) =
            write_labels("record_id,stage_index,label\nrec-1,0,agree\nrec-1,0,refute\n");
        let err = load_human_labels(&path).unwrap_err();
        match err {
            Error::LabelFile { line, detail, .. } => {
                assert_eq!(line, 3);
                assert!(detail.contains("duplicate"));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn bad_label_word_is_rejected() {
        let (_dir, path) = write_labels("record_id,stage_index,label\nrec-1,0,maybe\n");
        let err = load_human_labels(&path).unwrap_err();
        match err {
            Error::LabelFile { line, detail, .. } => {
                assert_eq!(line, 2);
                assert!(detail.contains("maybe"));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn missing_required_column_is_rejected() {
        let (_dir, path) = write_labels("record_id,label\nrec-1,agree\n");
        let err = load_human_labels(&path).unwrap_err();
        assert!(matches!(err, Error::LabelFile { line: 1, .. }));
    }

    // ---- calibration ----

    fn verdict(record: &str, index: u32, label: JudgeLabel) -> JudgeVerdict {
        JudgeVerdict {
            target_record_id: record.into(),
            stage_index: index,
            judge_model_key: "grader".into(),
            label,
            flagged: false,
            exchange_ref: Some("x".into()),
        }
    }

    #[test]
    fn identical_labels_calibrate_perfectly() {
        let verdicts = vec![
            verdict("a", 0, JudgeLabel::Agree),
            verdict("a", 1, JudgeLabel::Refute),
            verdict("b", 0, JudgeLabel::Unclear),
        ];
        let mut human = HumanLabels::default();
        human.insert("a", 0, JudgeLabel::Agree);
        human.insert("a", 1, JudgeLabel::Refute);
        human.insert("b", 0, JudgeLabel::Unclear);

        let report = calibrate(&verdicts, &human, "grader").unwrap();
        assert_eq!(report.overlap, 3);
        assert_eq!(report.accuracy_pct, 100.0);
        assert_eq!(report.macro_f1, 100.0);
        for class in &report.per_class {
            assert_eq!(class.score.f1, 100.0, "{:?}", class.label);
        }
        assert_eq!(report.binary_agree.f1, 100.0);
        assert_eq!(report.binary_pairs, 2);
        assert_eq!(report.binary_excluded_unclear, 1);
    }

    #[test]
    fn hand_worked_confusion_matrix_calibrates_exactly() {
        // Judge:  agree agree refute unclear agree
        // Human:  agree refute refute agree   unclear
        let verdicts = vec![
            verdict("a", 0, JudgeLabel::Agree),
            verdict("b", 0, JudgeLabel::Agree),
            verdict("c", 0, JudgeLabel::Refute),
            verdict("d", 0, JudgeLabel::Unclear),
            verdict("e", 0, JudgeLabel::Agree),
        ];
        let mut human = HumanLabels::default();
        human.insert("a", 0, JudgeLabel::Agree);
        human.insert("b", 0, JudgeLabel::Refute);
        human.insert("c", 0, JudgeLabel::Refute);
        human.insert("d", 0, JudgeLabel::Agree);
        human.insert("e", 0, JudgeLabel::Unclear);

        let report = calibrate(&verdicts, &human, "grader").unwrap();
        assert_eq!(report.overlap, 5);
        assert!((report.accuracy_pct - 40.0).abs() < 1e-9);

        // Agree one-vs-rest: tp=1 (a), fp=2 (b, e), fn=1 (d).
        let agree = &report.per_class[0];
        assert_eq!(agree.label, JudgeLabel::Agree);
        assert_eq!(agree.support, 2);
        assert!((agree.score.precision - 100.0 / 3.0).abs() < 1e-9);
        assert!((agree.score.recall - 50.0).abs() < 1e-9);

        // Binary excludes the human-unclear pair (e): tp=1, fp=1 (b), fn=1 (d).
        assert_eq!(report.binary_pairs, 4);
        assert_eq!(report.binary_excluded_unclear, 1);
        assert!((report.binary_agree.precision - 50.0).abs() < 1e-9);
        assert!((report.binary_agree.recall - 50.0).abs() < 1e-9);
    }

    #[test]
    fn labels_for_unknown_records_are_an_error() {
        let verdicts = vec![verdict("a", 0, JudgeLabel::Agree)];
        let mut human = HumanLabels::default();
        human.insert("ghost", 0, JudgeLabel::Agree);
        let err = calibrate(&verdicts, &human, "grader").unwrap_err();
        match err {
            Error::UnknownLabelTarget { detail } => assert!(detail.contains("ghost:0")),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn empty_label_file_cannot_calibrate() {
        let verdicts = vec![verdict("a", 0, JudgeLabel::Agree)];
        let err = calibrate(&verdicts, &HumanLabels::default(), "grader").unwrap_err();
        assert!(matches!(err, Error::EmptyCalibrationOverlap));
    }

    #[test]
    fn verdicts_from_other_judges_do_not_satisfy_labels() {
        let mut other = verdict("a", 0, JudgeLabel::Agree);
        other.judge_model_key = "someone-else".into();
        let mut human = HumanLabels::default();
        human.insert("a", 0, JudgeLabel::Agree);
        let err = calibrate(&[other], &human, "grader").unwrap_err();
        assert!(matches!(err, Error::UnknownLabelTarget { .. }));
    }
}
