//! Stage one: every audited model writes two truths and two lies about
//! every corpus item.
//!
//! The prompt demands a rigid four-line format (`TRUTH 1:` ... `LIE 2:`).
//! Replies are parsed strictly first, then with a lenient scan that
//! tolerates markdown bullets, bold markers, and case drift. A reply that
//! still does not yield exactly two truths and two lies triggers one
//! re-prompt with a stricter reminder; a second failure is recorded
//! permanently as a failure record and the (item, generator) pair is
//! excluded from downstream stages.
//!
//! Assertion ids are content-independent digests of (item, generator,
//! label, ordinal), so a resumed run recognizes work it has already done
//! without re-reading any model output.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use futures::{stream, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::context::RunContext;
use crate::corpus::{Corpus, DomainItem};
use crate::digest::short_id;
use crate::error::{Error, Result};
use crate::provider::{ChatProvider, ChatTurn, ModelSpec};
use crate::store::{FailureRecord, RecordKind, RunStore, StoreRecord};
use crate::template::{Stage, TemplateKind, TemplateSet};

/// What the generator claimed a statement to be. This label is the hidden
/// ground truth of stage two: verifiers never see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimedLabel {
    Truth,
    Lie,
}

impl ClaimedLabel {
    pub fn name(self) -> &'static str {
        match self {
            ClaimedLabel::Truth => "truth",
            ClaimedLabel::Lie => "lie",
        }
    }
}

/// One self-labeled statement authored by a generator model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    /// Digest of (item, generator, label, ordinal); stable across runs.
    pub assertion_id: String,
    pub item_id: String,
    pub generator_model_key: String,
    /// Statement text as written by the model (whitespace/markdown framing
    /// stripped, wording untouched).
    pub text: String,
    pub claimed_label: ClaimedLabel,
    /// 1 or 2 within the label.
    pub ordinal: u8,
    /// Request hash of the exchange this statement came from.
    pub exchange_ref: String,
}

impl StoreRecord for Assertion {
    const KIND: RecordKind = RecordKind::Assertion;

    fn dedupe_key(&self) -> String {
        self.assertion_id.clone()
    }
}

/// Deterministic assertion id for a slot, computable before (and after)
/// the statement exists.
pub fn assertion_id(
    item_id: &str,
    generator_model_key: &str,
    label: ClaimedLabel,
    ordinal: u8,
) -> String {
    short_id([
        item_id,
        generator_model_key,
        label.name(),
        &ordinal.to_string(),
    ])
}

/// The four (label, ordinal) slots of one generation task, in canonical
/// order: truth 1, truth 2, lie 1, lie 2.
pub const SLOTS: [(ClaimedLabel, u8); 4] = [
    (ClaimedLabel::Truth, 1),
    (ClaimedLabel::Truth, 2),
    (ClaimedLabel::Lie, 1),
    (ClaimedLabel::Lie, 2),
];

/// All assertions of a run, indexed for downstream stages. Only complete
/// groups (exactly four assertions for an (item, generator) pair) are
/// included; incomplete pairs are counted in `excluded_pairs`.
#[derive(Debug, Clone)]
pub struct TruthLieSet {
    pub corpus_id: String,
    pub generator_roster: Vec<String>,
    /// (item_id, generator) -> four assertions in slot order.
    groups: BTreeMap<(String, String), [Assertion; 4]>,
    pub excluded_pairs: usize,
}

impl TruthLieSet {
    /// Assemble from loose assertion records, keeping corpus/roster order.
    pub fn assemble(
        corpus: &Corpus,
        generator_roster: &[String],
        assertions: Vec<Assertion>,
    ) -> Self {
        let mut by_id: BTreeMap<String, Assertion> = assertions
            .into_iter()
            .map(|a| (a.assertion_id.clone(), a))
            .collect();
        let mut groups = BTreeMap::new();
        let mut excluded = 0;
        for item in &corpus.items {
            for generator in generator_roster {
                let ids: Vec<String> = SLOTS
                    .iter()
                    .map(|(label, ordinal)| assertion_id(&item.item_id, generator, *label, *ordinal))
                    .collect();
                if ids.iter().all(|id| by_id.contains_key(id)) {
                    let group: Vec<Assertion> =
                        ids.iter().map(|id| by_id.remove(id).unwrap()).collect();
                    groups.insert(
                        (item.item_id.clone(), generator.clone()),
                        group.try_into().expect("exactly four slots"),
                    );
                } else if ids.iter().any(|id| by_id.contains_key(id)) {
                    excluded += 1;
                }
            }
        }
        TruthLieSet {
            corpus_id: corpus.corpus_id.clone(),
            generator_roster: generator_roster.to_vec(),
            groups,
            excluded_pairs: excluded,
        }
    }

    pub fn group(&self, item_id: &str, generator: &str) -> Option<&[Assertion; 4]> {
        self.groups.get(&(item_id.to_string(), generator.to_string()))
    }

    /// The generator's two lies for an item, ordinal order.
    pub fn lies(&self, item_id: &str, generator: &str) -> Option<[&Assertion; 2]> {
        self.group(item_id, generator).map(|g| [&g[2], &g[3]])
    }

    /// Complete groups in canonical order.
    pub fn iter_groups(&self) -> impl Iterator<Item = (&str, &str, &[Assertion; 4])> {
        self.groups
            .iter()
            .map(|((item, generator), group)| (item.as_str(), generator.as_str(), group))
    }

    pub fn by_id(&self, assertion_id: &str) -> Option<&Assertion> {
        self.groups
            .values()
            .flat_map(|g| g.iter())
            .find(|a| a.assertion_id == assertion_id)
    }

    pub fn len_assertions(&self) -> usize {
        self.groups.len() * 4
    }

    pub fn len_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Load every assertion record of a run into an indexed set.
pub fn load_truth_lie_set(
    store: &RunStore,
    corpus: &Corpus,
    generator_roster: &[String],
) -> Result<TruthLieSet> {
    let assertions: Vec<Assertion> = store.load()?;
    Ok(TruthLieSet::assemble(corpus, generator_roster, assertions))
}

// ---- prompt rendering ----------------------------------------------------

/// Standard bindings shared by every per-item template.
pub fn item_bindings(item: &DomainItem) -> [(&'static str, String); 4] {
    [
        ("title", item.title.clone()),
        ("year_suffix", item.year_suffix()),
        ("domain_noun", item.domain_kind.noun().to_string()),
        ("moment_noun", item.domain_kind.moment_noun().to_string()),
    ]
}

/// The single-user-turn generation prompt for one item.
pub fn render_generation_prompt(
    item: &DomainItem,
    templates: &TemplateSet,
) -> Result<Vec<ChatTurn>> {
    let bindings = item_bindings(item);
    let borrowed: Vec<(&str, &str)> = bindings.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let prompt = templates.render(TemplateKind::Generation, &borrowed)?;
    Ok(vec![ChatTurn::user(prompt)])
}

// ---- reply parsing ---------------------------------------------------------

/// Why a reply could not be turned into assertions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseIssue {
    /// `parse` for format violations, `refusal` when the model declined.
    pub class: &'static str,
    pub detail: String,
}

/// A parsed statement before it becomes a stored assertion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionDraft {
    pub claimed_label: ClaimedLabel,
    pub ordinal: u8,
    pub text: String,
}

fn marker_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // Tolerates bullets, numbering, bold/emphasis around the marker,
        // `#` before the ordinal, and -, –, :, or . as the separator.
        Regex::new(r"(?i)^[\s>*\-+•\d.)(]{0,8}[*_~`]*\s*(truth|lie)\s*#?\s*([12])\s*[*_~`]*\s*[:.\-–—]\s*(.+)$")
            .expect("static regex compiles")
    })
}

fn refusal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(i can(no|')t|i cannot|i won't|i am unable|i'm unable|i am not able|i'm not able|i must decline|i'm sorry|i am sorry|as an ai)\b",
        )
        .expect("static regex compiles")
    })
}

/// Strip markdown emphasis and quote framing a model may wrap around a
/// statement, leaving the wording itself untouched.
fn clean_statement(raw: &str) -> String {
    let mut s = raw.trim();
    loop {
        let before = s;
        s = s.trim_matches(|c: char| matches!(c, '*' | '_' | '`')).trim();
        for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')] {
            if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
                s = s[open.len_utf8()..s.len() - close.len_utf8()].trim();
            }
        }
        if s == before {
            break;
        }
    }
    s.to_string()
}

/// Extract exactly two truths and two lies from a generation reply.
pub fn parse_generation_reply(reply: &str) -> std::result::Result<[AssertionDraft; 4], ParseIssue> {
    let mut found: BTreeMap<(ClaimedLabel, u8), String> = BTreeMap::new();
    for line in reply.lines() {
        let Some(caps) = marker_line_re().captures(line) else {
            continue;
        };
        let label = if caps[1].eq_ignore_ascii_case("truth") {
            ClaimedLabel::Truth
        } else {
            ClaimedLabel::Lie
        };
        let ordinal: u8 = caps[2].parse().expect("regex restricts to 1|2");
        let text = clean_statement(&caps[3]);
        if text.is_empty() {
            continue;
        }
        if found.insert((label, ordinal), text).is_some() {
            return Err(ParseIssue {
                class: "parse",
                detail: format!("{} {} appears more than once", label.name(), ordinal),
            });
        }
    }

    if found.is_empty() {
        if refusal_re().is_match(reply) {
            return Err(ParseIssue {
                class: "refusal",
                detail: "model declined to produce statements".into(),
            });
        }
        return Err(ParseIssue {
            class: "parse",
            detail: "no TRUTH/LIE marker lines found".into(),
        });
    }

    let truths = found.keys().filter(|(l, _)| *l == ClaimedLabel::Truth).count();
    let lies = found.len() - truths;
    if truths != 2 || lies != 2 {
        return Err(ParseIssue {
            class: "parse",
            detail: format!("expected 2 truths + 2 lies, found {truths} truths + {lies} lies"),
        });
    }

    let drafts: Vec<AssertionDraft> = SLOTS
        .iter()
        .map(|(label, ordinal)| AssertionDraft {
            claimed_label: *label,
            ordinal: *ordinal,
            text: found.remove(&(*label, *ordinal)).expect("counted above"),
        })
        .collect();
    Ok(drafts.try_into().expect("exactly four slots"))
}

// ---- the stage driver ------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GenerationSummary {
    pub tasks: usize,
    /// Tasks that produced four fresh assertions this invocation.
    pub completed: usize,
    /// Tasks skipped because their assertions (or a permanent failure
    /// record) already existed.
    pub resumed: usize,
    /// Tasks that needed the stricter re-prompt and then succeeded.
    pub reprompted: usize,
    /// Tasks that failed permanently this invocation.
    pub failed: usize,
}

enum TaskOutcome {
    Fresh { reprompted: bool },
    Resumed,
    Failed,
}

/// Run (or resume) generation for every (item, generator) pair. On
/// success the stage is marked complete; dependency-gated stages can then
/// proceed.
pub async fn run_generation(
    ctx: &RunContext,
    corpus: &Corpus,
    roster: &[ModelSpec],
) -> Result<GenerationSummary> {
    let version = ctx.templates.stage_version(Stage::Generate)?;
    let mut tasks = Vec::new();
    for item in &corpus.items {
        for spec in roster {
            tasks.push((item, spec));
        }
    }
    let total = tasks.len();

    let outcomes = stream::iter(tasks)
        .map(|(item, spec)| {
            let ctx = ctx.clone();
            let version = version.clone();
            async move { generation_task(&ctx, item, spec, &version).await }
        })
        .buffer_unordered(ctx.concurrency)
        .collect::<Vec<Result<TaskOutcome>>>()
        .await;

    let mut summary = GenerationSummary {
        tasks: total,
        ..Default::default()
    };
    for outcome in outcomes {
        match outcome? {
            TaskOutcome::Fresh { reprompted } => {
                summary.completed += 1;
                if reprompted {
                    summary.reprompted += 1;
                }
            }
            TaskOutcome::Resumed => summary.resumed += 1,
            TaskOutcome::Failed => summary.failed += 1,
        }
    }

    if ctx.cancelled() {
        return Err(Error::Interrupted);
    }

    ctx.store
        .mark_stage_complete(Stage::Generate.name(), serde_json::to_value(&summary)?)?;
    log::info!(
        "generation: {} tasks ({} fresh, {} resumed, {} reprompted, {} failed)",
        summary.tasks,
        summary.completed,
        summary.resumed,
        summary.reprompted,
        summary.failed
    );
    Ok(summary)
}

async fn generation_task(
    ctx: &RunContext,
    item: &DomainItem,
    spec: &ModelSpec,
    version: &str,
) -> Result<TaskOutcome> {
    let task_key = format!("{}:{}", item.item_id, spec.model_key);
    let ids: Vec<String> = SLOTS
        .iter()
        .map(|(label, ordinal)| assertion_id(&item.item_id, &spec.model_key, *label, *ordinal))
        .collect();
    if ids.iter().all(|id| ctx.store.has_key(RecordKind::Assertion, id)) {
        return Ok(TaskOutcome::Resumed);
    }
    if ctx
        .store
        .has_key(RecordKind::Failure, &format!("generate:{task_key}"))
    {
        // Permanently failed on a previous invocation; replaying the cached
        // exchange would fail identically.
        return Ok(TaskOutcome::Resumed);
    }
    if ctx.cancelled() {
        return Err(Error::Interrupted);
    }

    let turns = render_generation_prompt(item, &ctx.templates)?;
    let exchange = ctx.provider.complete(spec, &turns, version).await?;

    let (drafts, reprompted, exchange_ref) = match parse_generation_reply(&exchange.response) {
        Ok(drafts) => (drafts, false, exchange.request_hash.clone()),
        Err(first_issue) => {
            // One stricter re-prompt, carrying the failed reply as context.
            let bindings = item_bindings(item);
            let borrowed: Vec<(&str, &str)> =
                bindings.iter().map(|(k, v)| (*k, v.as_str())).collect();
            let reminder = ctx
                .templates
                .render(TemplateKind::GenerationRetry, &borrowed)?;
            let mut retry_turns = turns.clone();
            retry_turns.push(ChatTurn::assistant(exchange.response.clone()));
            retry_turns.push(ChatTurn::user(reminder));
            let retry = ctx.provider.complete(spec, &retry_turns, version).await?;
            match parse_generation_reply(&retry.response) {
                Ok(drafts) => (drafts, true, retry.request_hash.clone()),
                Err(second_issue) => {
                    log::warn!(
                        "generation failed for {task_key}: {} then {}",
                        first_issue.detail,
                        second_issue.detail
                    );
                    ctx.store.append(&FailureRecord {
                        stage: Stage::Generate.name().into(),
                        task_key,
                        class: second_issue.class.into(),
                        detail: format!(
                            "first reply: {}; after re-prompt: {}",
                            first_issue.detail, second_issue.detail
                        ),
                    })?;
                    return Ok(TaskOutcome::Failed);
                }
            }
        }
    };

    for draft in drafts {
        ctx.store.append(&Assertion {
            assertion_id: assertion_id(
                &item.item_id,
                &spec.model_key,
                draft.claimed_label,
                draft.ordinal,
            ),
            item_id: item.item_id.clone(),
            generator_model_key: spec.model_key.clone(),
            text: draft.text,
            claimed_label: draft.claimed_label,
            ordinal: draft.ordinal,
            exchange_ref: exchange_ref.clone(),
        })?;
    }
    Ok(TaskOutcome::Fresh { reprompted })
}
