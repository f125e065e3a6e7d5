//! Stage two: every model rules on every assertion, labels withheld.
//!
//! For each (item, generator) group the verifier sees the four statements
//! as a numbered list — shuffled so truths and lies never sit in a fixed
//! pattern — and must answer True, False, or "I don't know" per line. The
//! shuffle is a pure function of (item id, template version): no RNG state,
//! no run-to-run drift, and identical presentation for every verifier, so
//! verdicts across models are comparable per statement position.
//!
//! Answers are matched against a closed synonym table. Anything outside the
//! table (hedges like "probably true", commentary, blanks) becomes an
//! abstention with a `flagged` marker, keeping genuine "I don't know"
//! distinguishable from unparseable noise in the idk-rate reports.

use std::collections::BTreeMap;

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};

use crate::context::RunContext;
use crate::corpus::{Corpus, DomainItem};
use crate::digest::hex_sha256_fields;
use crate::error::{Error, Result};
use crate::generation::{item_bindings, Assertion, ClaimedLabel, ParseIssue, TruthLieSet};
use crate::provider::{ChatProvider, ChatTurn, ModelSpec};
use crate::store::{FailureRecord, RecordKind, RunStore, StoreRecord};
use crate::template::{Stage, TemplateKind, TemplateSet};

/// A verifier's ruling on one assertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictValue {
    AffirmTrue,
    AffirmFalse,
    AbstainIdk,
}

impl VerdictValue {
    pub fn name(self) -> &'static str {
        match self {
            VerdictValue::AffirmTrue => "true",
            VerdictValue::AffirmFalse => "false",
            VerdictValue::AbstainIdk => "idk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub assertion_id: String,
    pub verifier_model_key: String,
    pub value: VerdictValue,
    /// True when the answer was unparseable and coerced to an abstention,
    /// as opposed to the model genuinely answering "I don't know".
    pub flagged: bool,
    /// Request hash of the exchange this ruling came from.
    pub raw_exchange_ref: String,
}

impl StoreRecord for Verdict {
    const KIND: RecordKind = RecordKind::Verdict;

    fn dedupe_key(&self) -> String {
        verdict_key(&self.assertion_id, &self.verifier_model_key)
    }
}

pub fn verdict_key(assertion_id: &str, verifier: &str) -> String {
    format!("{assertion_id}:{verifier}")
}

impl Verdict {
    /// Correct means the ruling matches the generator's hidden label.
    /// Abstentions are neither correct nor incorrect.
    pub fn correctness(&self, claimed: ClaimedLabel) -> Option<bool> {
        match self.value {
            VerdictValue::AffirmTrue => Some(claimed == ClaimedLabel::Truth),
            VerdictValue::AffirmFalse => Some(claimed == ClaimedLabel::Lie),
            VerdictValue::AbstainIdk => None,
        }
    }
}

// ---- deterministic presentation order -------------------------------------

/// splitmix64: tiny, well-studied, and stable forever. The statement
/// shuffle is part of recorded prompts, so it must never change behind a
/// dependency upgrade.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The order assertion slots are shown in: position `i` of the prompt
/// holds slot `order[i]` of the canonical group (T1, T2, L1, L2). Pure in
/// (item id, template version).
pub fn presentation_order(item_id: &str, template_version: &str) -> [usize; 4] {
    let digest = hex_sha256_fields([item_id, template_version]);
    let mut seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    let mut order = [0usize, 1, 2, 3];
    // Fisher–Yates driven by splitmix64.
    for i in (1..4).rev() {
        let j = (splitmix64(&mut seed) % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

// ---- prompt rendering -------------------------------------------------------

/// Render the verification prompt for one assertion group. Returns the
/// turns and the presentation order used, so answer positions can be mapped
/// back to assertions. The prompt contains statement texts only — claimed
/// labels never appear.
pub fn render_verification_prompt(
    item: &DomainItem,
    group: &[Assertion; 4],
    templates: &TemplateSet,
) -> Result<(Vec<ChatTurn>, [usize; 4])> {
    let generator = &group[0].generator_model_key;
    for a in group {
        if a.item_id != item.item_id {
            return Err(Error::AssertionGroup {
                item_id: item.item_id.clone(),
                detail: format!("assertion {} belongs to item `{}`", a.assertion_id, a.item_id),
            });
        }
        if &a.generator_model_key != generator {
            return Err(Error::AssertionGroup {
                item_id: item.item_id.clone(),
                detail: "assertions from mixed generators".into(),
            });
        }
    }
    let truths = group
        .iter()
        .filter(|a| a.claimed_label == ClaimedLabel::Truth)
        .count();
    if truths != 2 {
        return Err(Error::AssertionGroup {
            item_id: item.item_id.clone(),
            detail: format!("expected 2 truths + 2 lies, got {truths} truths"),
        });
    }

    let version = templates.version(TemplateKind::Verification)?;
    let order = presentation_order(&item.item_id, version);
    let block = order
        .iter()
        .enumerate()
        .map(|(pos, &slot)| format!("{}. {}", pos + 1, group[slot].text))
        .collect::<Vec<_>>()
        .join("\n");

    let bindings = item_bindings(item);
    let mut borrowed: Vec<(&str, &str)> =
        bindings.iter().map(|(k, v)| (*k, v.as_str())).collect();
    borrowed.push(("assertions", &block));
    let prompt = templates.render(TemplateKind::Verification, &borrowed)?;
    Ok((vec![ChatTurn::user(prompt)], order))
}

/// True when a rendered verification prompt leaks generator labels. Used
/// by tests scanning rendered prompts; matches the marker forms the
/// generation stage uses (`TRUTH 1:`, `lie 2 -`, ...).
pub fn contains_label_leak(prompt: &str) -> bool {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r"(?i)\b(truth|lie)\s*#?\s*[12]?\s*[:.\-–—]").expect("static regex")
    });
    re.is_match(prompt)
}

// ---- reply parsing ----------------------------------------------------------

/// Closed synonym table. Matching is exact on the normalized token —
/// anything else is flagged, never guessed.
fn classify_answer(token: &str) -> Option<VerdictValue> {
    let t = normalize_answer(token);
    match t.as_str() {
        "true" | "t" | "yes" | "correct" | "accurate" => Some(VerdictValue::AffirmTrue),
        "false" | "f" | "no" | "incorrect" | "inaccurate" | "untrue" | "wrong" => {
            Some(VerdictValue::AffirmFalse)
        }
        "i dont know" | "i do not know" | "idk" | "dont know" | "unknown" | "not sure"
        | "unsure" | "uncertain" | "cannot say" | "cant say" | "no idea" => {
            Some(VerdictValue::AbstainIdk)
        }
        _ => None,
    }
}

fn normalize_answer(raw: &str) -> String {
    raw.to_lowercase()
        .chars()
        .filter(|c| !matches!(c, '*' | '_' | '`' | '.' | ',' | '!' | '"' | '\u{2019}' | '\''))
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parse one verification reply into `expected` (value, flagged) pairs in
/// presentation order. Strict pass: numbered lines `N. answer`. Lenient
/// fallback: exactly `expected` non-empty lines taken positionally.
pub fn parse_verification_reply(
    reply: &str,
    expected: usize,
) -> std::result::Result<Vec<(VerdictValue, bool)>, ParseIssue> {
    let numbered_re = regex::Regex::new(r"^\s*[*\-]*\s*(\d+)\s*[:.)\-]\s*(.+)$").expect("static");
    let mut numbered: BTreeMap<usize, String> = BTreeMap::new();
    let mut bare_lines: Vec<String> = Vec::new();
    for line in reply.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(caps) = numbered_re.captures(trimmed) {
            if let Ok(n) = caps[1].parse::<usize>() {
                if (1..=expected).contains(&n) {
                    numbered.entry(n).or_insert_with(|| caps[2].to_string());
                    continue;
                }
            }
        }
        bare_lines.push(trimmed.to_string());
    }

    let answers: Vec<String> = if numbered.len() == expected {
        (1..=expected).map(|n| numbered[&n].clone()).collect()
    } else if numbered.is_empty() && bare_lines.len() == expected {
        // Lenient fallback: unnumbered but the right number of lines.
        bare_lines
    } else {
        return Err(ParseIssue {
            class: "parse",
            detail: format!(
                "expected {expected} numbered answers, found {} numbered and {} other lines",
                numbered.len(),
                bare_lines.len()
            ),
        });
    };

    Ok(answers
        .iter()
        .map(|raw| match classify_answer(raw) {
            Some(value) => (value, false),
            // Hedges and commentary become flagged abstentions.
            None => (VerdictValue::AbstainIdk, true),
        })
        .collect())
}

// ---- the stage driver --------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerificationSummary {
    pub tasks: usize,
    pub completed: usize,
    pub resumed: usize,
    pub failed: usize,
}

enum TaskOutcome {
    Fresh,
    Resumed,
    Failed,
}

/// Run (or resume) verification: every verifier rules on every complete
/// assertion group.
pub async fn run_verification(
    ctx: &RunContext,
    corpus: &Corpus,
    dataset: &TruthLieSet,
    verifiers: &[ModelSpec],
) -> Result<VerificationSummary> {
    let version = ctx.templates.stage_version(Stage::Verify)?;
    let mut tasks = Vec::new();
    for (item_id, generator, group) in dataset.iter_groups() {
        let item = corpus.item(item_id).ok_or_else(|| Error::EmptyInput {
            detail: format!("dataset references item `{item_id}` not present in the corpus"),
        })?;
        for spec in verifiers {
            tasks.push((item, generator.to_string(), group, spec));
        }
    }
    let total = tasks.len();

    let outcomes = stream::iter(tasks)
        .map(|(item, generator, group, spec)| {
            let ctx = ctx.clone();
            let version = version.clone();
            async move { verification_task(&ctx, item, &generator, group, spec, &version).await }
        })
        .buffer_unordered(ctx.concurrency)
        .collect::<Vec<Result<TaskOutcome>>>()
        .await;

    let mut summary = VerificationSummary {
        tasks: total,
        ..Default::default()
    };
    for outcome in outcomes {
        match outcome? {
            TaskOutcome::Fresh => summary.completed += 1,
            TaskOutcome::Resumed => summary.resumed += 1,
            TaskOutcome::Failed => summary.failed += 1,
        }
    }

    if ctx.cancelled() {
        return Err(Error::Interrupted);
    }

    ctx.store
        .mark_stage_complete(Stage::Verify.name(), serde_json::to_value(&summary)?)?;
    log::info!(
        "verification: {} tasks ({} fresh, {} resumed, {} failed)",
        summary.tasks,
        summary.completed,
        summary.resumed,
        summary.failed
    );
    Ok(summary)
}

async fn verification_task(
    ctx: &RunContext,
    item: &DomainItem,
    generator: &str,
    group: &[Assertion; 4],
    spec: &ModelSpec,
    version: &str,
) -> Result<TaskOutcome> {
    let task_key = format!("{}:{}:{}", item.item_id, generator, spec.model_key);
    let all_present = group
        .iter()
        .all(|a| ctx.store.has_key(RecordKind::Verdict, &verdict_key(&a.assertion_id, &spec.model_key)));
    if all_present {
        return Ok(TaskOutcome::Resumed);
    }
    if ctx
        .store
        .has_key(RecordKind::Failure, &format!("verify:{task_key}"))
    {
        return Ok(TaskOutcome::Resumed);
    }
    if ctx.cancelled() {
        return Err(Error::Interrupted);
    }

    let (turns, order) = render_verification_prompt(item, group, &ctx.templates)?;
    let exchange = ctx.provider.complete(spec, &turns, version).await?;

    match parse_verification_reply(&exchange.response, 4) {
        Ok(answers) => {
            for (pos, (value, flagged)) in answers.into_iter().enumerate() {
                let assertion = &group[order[pos]];
                ctx.store.append(&Verdict {
                    assertion_id: assertion.assertion_id.clone(),
                    verifier_model_key: spec.model_key.clone(),
                    value,
                    flagged,
                    raw_exchange_ref: exchange.request_hash.clone(),
                })?;
            }
            Ok(TaskOutcome::Fresh)
        }
        Err(issue) => {
            log::warn!("verification failed for {task_key}: {}", issue.detail);
            ctx.store.append(&FailureRecord {
                stage: Stage::Verify.name().into(),
                task_key,
                class: issue.class.into(),
                detail: issue.detail,
            })?;
            Ok(TaskOutcome::Failed)
        }
    }
}

// ---- verdict matrix -----------------------------------------------------------

/// Aggregated counts for one generator × verifier cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CellCounts {
    pub correct: u64,
    pub incorrect: u64,
    /// All abstentions, flagged or genuine.
    pub abstain: u64,
    /// The subset of `abstain` that was coerced from unparseable answers.
    pub flagged: u64,
}

impl CellCounts {
    pub fn total(&self) -> u64 {
        self.correct + self.incorrect + self.abstain
    }

    fn add(&mut self, verdict: &Verdict, claimed: ClaimedLabel) {
        match verdict.correctness(claimed) {
            Some(true) => self.correct += 1,
            Some(false) => self.incorrect += 1,
            None => {
                self.abstain += 1;
                if verdict.flagged {
                    self.flagged += 1;
                }
            }
        }
    }
}

/// Generator × verifier verdict counts; the backbone of the consistency
/// tables.
#[derive(Debug, Clone)]
pub struct VerdictMatrix {
    pub generators: Vec<String>,
    pub verifiers: Vec<String>,
    cells: BTreeMap<(String, String), CellCounts>,
}

impl VerdictMatrix {
    /// Join verdicts against the dataset's hidden labels. Verdicts whose
    /// assertion is not in the dataset are ignored (their group was
    /// incomplete and excluded).
    pub fn build(
        dataset: &TruthLieSet,
        verdicts: &[Verdict],
        generators: &[String],
        verifiers: &[String],
    ) -> Self {
        let mut cells: BTreeMap<(String, String), CellCounts> = BTreeMap::new();
        for g in generators {
            for v in verifiers {
                cells.insert((g.clone(), v.clone()), CellCounts::default());
            }
        }
        for verdict in verdicts {
            let Some(assertion) = dataset.by_id(&verdict.assertion_id) else {
                continue;
            };
            let key = (
                assertion.generator_model_key.clone(),
                verdict.verifier_model_key.clone(),
            );
            if let Some(cell) = cells.get_mut(&key) {
                cell.add(verdict, assertion.claimed_label);
            }
        }
        VerdictMatrix {
            generators: generators.to_vec(),
            verifiers: verifiers.to_vec(),
            cells,
        }
    }

    pub fn cell(&self, generator: &str, verifier: &str) -> CellCounts {
        self.cells
            .get(&(generator.to_string(), verifier.to_string()))
            .copied()
            .unwrap_or_default()
    }
}

/// Load all verdicts of a run.
pub fn load_verdicts(store: &RunStore) -> Result<Vec<Verdict>> {
    store.load()
}
