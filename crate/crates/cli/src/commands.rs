//! Command implementations: each maps the resolved settings onto core
//! pipeline calls, enforcing stage order and the stdout/stderr contract
//! (progress and logs to stderr, data to files or stdout).

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use serde_json::json;

use haunt_core::context::RunContext;
use haunt_core::corpus::{load_corpus, Corpus};
use haunt_core::digest::{canonical_digest, hex_sha256_fields};
use haunt_core::generation::{
    item_bindings, load_truth_lie_set, render_generation_prompt, run_generation, TruthLieSet,
};
use haunt_core::judge::{
    calibrate, load_human_labels, load_judge_verdicts, render_judge_prompt, run_judge,
};
use haunt_core::keyword::{load_ground_truth, run_keyword_truth, KeywordSpec};
use haunt_core::nudge::{
    as_sentence, lie_judge_tasks, load_dialogues, run_lie_nudges, run_reference_nudges,
};
use haunt_core::provider::{ChatTurn, MockProvider, ModelSpec, ProviderRouter};
use haunt_core::report::{emit_reports, metrics_json, ReportInputs};
use haunt_core::store::{RunIdentity, RunStore};
use haunt_core::template::{TemplateKind, TemplateSet};
use haunt_core::verification::{load_verdicts, render_verification_prompt, run_verification};
use haunt_core::{Error, Result};

use crate::config::{Roster, Settings};

/// Pipeline stages in dependency order. Running a stage requires every
/// earlier one to be complete; the reference-nudge protocol, keyword scan,
/// and report emission sit outside the chain.
const STAGE_CHAIN: [&str; 5] = ["generate", "verify", "nudge", "judge", "stats"];

fn require_chain(store: &RunStore, stage: &str) -> Result<()> {
    if let Some(position) = STAGE_CHAIN.iter().position(|s| *s == stage) {
        for dependency in &STAGE_CHAIN[..position] {
            store.require_stage(stage, dependency)?;
        }
    }
    Ok(())
}

/// Everything an opened run needs: inputs loaded, store attached, provider
/// routed, and an interrupt listener armed so Ctrl-C drains in-flight work.
pub struct App {
    pub settings: Settings,
    pub corpus: Corpus,
    pub roster: Roster,
    pub ctx: RunContext,
}

impl App {
    pub fn open(settings: Settings) -> Result<App> {
        let corpus = load_corpus(settings.corpus_path()?)?;
        let roster = Roster::load(settings.roster_path()?)?;
        let templates = match &settings.templates {
            Some(dir) => TemplateSet::from_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        let identity = RunIdentity {
            corpus_digest: corpus.digest()?,
            roster_digest: roster.digests()?,
            template_versions: templates.stage_versions()?,
            config: json!({
                "audited": roster.audited_keys(),
                "judge": settings.judge,
            }),
        };
        let store = Arc::new(RunStore::create_or_open(
            &settings.out,
            &settings.run_id,
            identity,
        )?);
        let mock = match &settings.mock_script {
            Some(path) => Some(Arc::new(MockProvider::load(path)?)),
            None => None,
        };
        let provider = Arc::new(ProviderRouter::new(store.clone(), mock)?);
        let ctx = RunContext::new(store, provider, Arc::new(templates), settings.concurrency);

        let cancel = ctx.cancel_flag();
        tokio::spawn(async move {
            if tokio::signal::ctrl_c().await.is_ok() {
                log::warn!("interrupt received; draining in-flight work before stopping");
                cancel.store(true, Ordering::Relaxed);
            }
        });

        Ok(App {
            settings,
            corpus,
            roster,
            ctx,
        })
    }

    fn judge_spec(&self) -> Result<&ModelSpec> {
        let key = self.settings.judge.as_deref().ok_or_else(|| Error::Config {
            detail: "no judge configured: set `judge` in the config file or pass --judge".into(),
        })?;
        self.roster.get(key)
    }

    fn dataset(&self) -> Result<TruthLieSet> {
        load_truth_lie_set(&self.ctx.store, &self.corpus, &self.roster.audited_keys())
    }
}

// ---- corpus-validate --------------------------------------------------------

/// Checks the corpus file parses, ids are unique, and every referenced
/// reference text loads. Purely a file check: no run store is touched.
pub fn corpus_validate(settings: &Settings) -> Result<()> {
    let corpus = load_corpus(settings.corpus_path()?)?;
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    let mut with_reference = 0usize;
    for item in &corpus.items {
        *kinds.entry(item.domain_kind.noun()).or_default() += 1;
        if corpus.reference_text(item)?.is_some() {
            with_reference += 1;
        }
    }
    let breakdown: Vec<String> = kinds.iter().map(|(k, n)| format!("{n} {k}")).collect();
    println!(
        "corpus ok: {} items ({}), {} with reference text",
        corpus.len(),
        breakdown.join(", "),
        with_reference,
    );
    Ok(())
}

// ---- provider stages ----------------------------------------------------

pub async fn generate(app: &App) -> Result<()> {
    if app.settings.dry_run {
        let mut prompts = Vec::new();
        for item in &app.corpus.items {
            let turns = render_generation_prompt(item, &app.ctx.templates)?;
            for spec in &app.roster.audited {
                prompts.push((
                    format!("generate {}:{}", item.item_id, spec.model_key),
                    turns.clone(),
                ));
            }
        }
        return print_dry_run(prompts);
    }
    let summary = run_generation(&app.ctx, &app.corpus, &app.roster.audited).await?;
    log::info!(
        "generation: {} tasks — {} fresh, {} resumed, {} via re-prompt, {} failed",
        summary.tasks,
        summary.completed,
        summary.resumed,
        summary.reprompted,
        summary.failed,
    );
    Ok(())
}

pub async fn verify(app: &App) -> Result<()> {
    require_chain(&app.ctx.store, "verify")?;
    let dataset = app.dataset()?;
    if app.settings.dry_run {
        let mut prompts = Vec::new();
        for (item_id, generator, group) in dataset.iter_groups() {
            let item = app.corpus.item(item_id).ok_or_else(|| Error::Config {
                detail: format!("stored assertions reference unknown item `{item_id}`"),
            })?;
            let (turns, _) = render_verification_prompt(item, group, &app.ctx.templates)?;
            for verifier in &app.roster.audited {
                prompts.push((
                    format!("verify {item_id}:{generator}:{}", verifier.model_key),
                    turns.clone(),
                ));
            }
        }
        return print_dry_run(prompts);
    }
    let summary = run_verification(&app.ctx, &app.corpus, &dataset, &app.roster.audited).await?;
    log::info!(
        "verification: {} tasks — {} fresh, {} resumed, {} failed",
        summary.tasks,
        summary.completed,
        summary.resumed,
        summary.failed,
    );
    Ok(())
}

pub async fn nudge(app: &App) -> Result<()> {
    require_chain(&app.ctx.store, "nudge")?;
    let dataset = app.dataset()?;
    if app.settings.dry_run {
        let mut prompts = Vec::new();
        for item in &app.corpus.items {
            let bindings = item_bindings(item);
            let base: Vec<(&str, &str)> = bindings.iter().map(|(k, v)| (*k, v.as_str())).collect();
            for subject in &app.roster.audited {
                let Some(lies) = dataset.lies(&item.item_id, &subject.model_key) else {
                    continue;
                };
                let key = |stage: &str| {
                    format!("nudge {}:{}:{stage}", item.item_id, subject.model_key)
                };
                prompts.push((
                    key("familiarity"),
                    user_prompt(app, TemplateKind::Familiarity, &base)?,
                ));
                prompts.push((
                    key("setup"),
                    user_prompt(app, TemplateKind::LieNudgeSetup, &base)?,
                ));
                for (kind, stage, lie) in [
                    (TemplateKind::LieNudgeFirst, "lie_1", lies[0]),
                    (TemplateKind::LieNudgeSecond, "lie_2", lies[1]),
                ] {
                    let lie_text = as_sentence(&lie.text);
                    let mut with_lie = base.clone();
                    with_lie.push(("lie", &lie_text));
                    prompts.push((key(stage), user_prompt(app, kind, &with_lie)?));
                }
            }
        }
        return print_dry_run(prompts);
    }
    let summary = run_lie_nudges(&app.ctx, &app.corpus, &dataset, &app.roster.audited).await?;
    log_dialogue_summary("lie nudge", &summary);
    Ok(())
}

pub async fn refnudge(app: &App, concept_flag: Option<String>) -> Result<()> {
    let concept = concept_flag
        .or_else(|| app.settings.concept.clone())
        .ok_or_else(|| Error::Config {
            detail: "no concept configured: set `concept` in the config file or pass --concept"
                .into(),
        })?;
    if app.settings.dry_run {
        let mut prompts = Vec::new();
        for item in &app.corpus.items {
            let bindings = item_bindings(item);
            let mut base: Vec<(&str, &str)> =
                bindings.iter().map(|(k, v)| (*k, v.as_str())).collect();
            base.push(("concept", &concept));
            for subject in &app.roster.audited {
                let key = |stage: &str| {
                    format!("refnudge {}:{}:{stage}", item.item_id, subject.model_key)
                };
                for (kind, stage) in [
                    (TemplateKind::Familiarity, "familiarity"),
                    (TemplateKind::RefNudgeFavorite, "favorite"),
                    (TemplateKind::RefNudgeFirst, "nudge_1"),
                    (TemplateKind::RefNudgeSecond, "nudge_2"),
                ] {
                    prompts.push((key(stage), user_prompt(app, kind, &base)?));
                }
            }
        }
        return print_dry_run(prompts);
    }
    let judge = app.judge_spec()?;
    let summary =
        run_reference_nudges(&app.ctx, &app.corpus, &app.roster.audited, &concept, judge).await?;
    log_dialogue_summary("reference nudge", &summary);
    Ok(())
}

pub async fn judge(app: &App) -> Result<()> {
    require_chain(&app.ctx.store, "judge")?;
    let dataset = app.dataset()?;
    let dialogues = load_dialogues(&app.ctx)?;
    let tasks = lie_judge_tasks(&dialogues, &dataset)?;
    if app.settings.dry_run {
        let mut prompts = Vec::new();
        for task in &tasks {
            let item = app.corpus.item(&task.item_id).ok_or_else(|| Error::Config {
                detail: format!("stored dialogue references unknown item `{}`", task.item_id),
            })?;
            let turns = render_judge_prompt(item, &task.question, &task.reply, &app.ctx.templates)?;
            prompts.push((
                format!("judge {}:{}", task.target_record_id, task.stage_index),
                turns,
            ));
        }
        return print_dry_run(prompts);
    }
    let judge = app.judge_spec()?;
    let summary = run_judge(&app.ctx, &app.corpus, judge, tasks).await?;
    log::info!(
        "judging: {} tasks — {} judged, {} resumed, {} empty replies",
        summary.tasks,
        summary.judged,
        summary.resumed,
        summary.empty_replies,
    );
    Ok(())
}

fn log_dialogue_summary(label: &str, summary: &haunt_core::nudge::NudgeRunSummary) {
    log::info!(
        "{label}: {} dialogues — {} fresh, {} resumed, {} unfamiliar, {} skipped (no usable lies)",
        summary.tasks,
        summary.completed,
        summary.resumed,
        summary.unfamiliar,
        summary.skipped_missing_lies,
    );
}

// ---- local stages ---------------------------------------------------------

pub fn keyword_truth(app: &App, keywords_flag: Option<std::path::PathBuf>) -> Result<()> {
    let path = keywords_flag
        .or_else(|| app.settings.keywords.clone())
        .ok_or_else(|| Error::Config {
            detail:
                "no keyword spec configured: set `keywords` in the config file or pass --keywords"
                    .into(),
        })?;
    let spec = KeywordSpec::load(&path)?;
    run_keyword_truth(&app.ctx, &app.corpus, &spec)?;
    Ok(())
}

pub fn calibrate_judge(app: &App, labels_flag: Option<std::path::PathBuf>) -> Result<()> {
    let path = labels_flag
        .or_else(|| app.settings.labels.clone())
        .ok_or_else(|| Error::Config {
            detail: "no label file configured: set `labels` in the config file or pass --labels"
                .into(),
        })?;
    let labels = load_human_labels(&path)?;
    let verdicts = load_judge_verdicts(&app.ctx)?;
    if verdicts.is_empty() {
        // No verdicts at all: the judge (or an inline-judged reference
        // nudge) has to run first.
        app.ctx.store.require_stage("calibrate", "judge")?;
    }
    let judge_key = match app.settings.judge.clone() {
        Some(key) => key,
        None => verdicts
            .iter()
            .map(|v| v.judge_model_key.clone())
            .min()
            .unwrap_or_default(),
    };
    let report = calibrate(&verdicts, &labels, &judge_key)?;
    app.ctx.store.mark_stage_complete(
        "calibrate",
        json!({
            "judge": report.judge_model_key,
            "overlap": report.overlap,
            "accuracy_pct": report.accuracy_pct,
            "macro_f1": report.macro_f1,
        }),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

// ---- analytics ------------------------------------------------------------

struct Gathered {
    dataset: TruthLieSet,
    verdicts: Vec<haunt_core::verification::Verdict>,
    dialogues: Vec<haunt_core::nudge::DialogueRecord>,
    judge_verdicts: Vec<haunt_core::judge::JudgeVerdict>,
    ground_truth: Vec<haunt_core::keyword::GroundTruth>,
    human_labels: Option<haunt_core::judge::HumanLabels>,
}

fn gather(app: &App) -> Result<Gathered> {
    Ok(Gathered {
        dataset: app.dataset()?,
        verdicts: load_verdicts(&app.ctx.store)?,
        dialogues: load_dialogues(&app.ctx)?,
        judge_verdicts: load_judge_verdicts(&app.ctx)?,
        ground_truth: load_ground_truth(&app.ctx)?,
        human_labels: match &app.settings.labels {
            Some(path) => Some(load_human_labels(path)?),
            None => None,
        },
    })
}

impl Gathered {
    fn inputs<'a>(&'a self, app: &'a App) -> ReportInputs<'a> {
        ReportInputs {
            run_id: app.ctx.store.run_id(),
            corpus: &app.corpus,
            dataset: &self.dataset,
            verdicts: &self.verdicts,
            dialogues: &self.dialogues,
            judge_verdicts: &self.judge_verdicts,
            ground_truth: &self.ground_truth,
            human_labels: self.human_labels.as_ref(),
            judge_key: app.settings.judge.as_deref(),
            contrast_top_k: app.settings.contrast_top_k,
        }
    }
}

/// Computes run metrics, writes them to `stats.json` in the run directory,
/// and echoes them to stdout.
pub fn stats(app: &App) -> Result<()> {
    require_chain(&app.ctx.store, "stats")?;
    let gathered = gather(app)?;
    let text = metrics_json(&gathered.inputs(app))?.unwrap_or_else(|| "{}\n".into());
    let path = app.ctx.store.run_dir().join("stats.json");
    std::fs::write(&path, &text).map_err(|e| Error::io(path.display().to_string(), e))?;
    app.ctx
        .store
        .mark_stage_complete("stats", json!({ "bytes": text.len() }))?;
    print!("{text}");
    Ok(())
}

/// Emits the full report bundle under `<run dir>/reports`.
pub fn report(app: &App) -> Result<()> {
    let gathered = gather(app)?;
    let out_dir = app.ctx.store.run_dir().join("reports");
    let bundle = emit_reports(&gathered.inputs(app), &out_dir)?;
    app.ctx.store.mark_stage_complete(
        "report",
        json!({ "files": bundle.files.len() }),
    )?;
    log::info!(
        "report: {} files in {}",
        bundle.files.len(),
        bundle.out_dir.display(),
    );
    Ok(())
}

// ---- dry-run rendering -----------------------------------------------------

fn user_prompt(app: &App, kind: TemplateKind, bindings: &[(&str, &str)]) -> Result<Vec<ChatTurn>> {
    Ok(vec![ChatTurn::user(app.ctx.templates.render(kind, bindings)?)])
}

/// Prints one `<digest16>  <task key>` line per prompt, sorted by key, then
/// a combined digest over all of them. Nothing is dispatched or stored, so
/// repeated dry runs over the same inputs print identical bytes.
fn print_dry_run(mut prompts: Vec<(String, Vec<ChatTurn>)>) -> Result<()> {
    prompts.sort_by(|a, b| a.0.cmp(&b.0));
    let mut digests = Vec::with_capacity(prompts.len());
    for (key, turns) in &prompts {
        let digest = canonical_digest(turns)?;
        println!("{}  {key}", &digest[..16]);
        digests.push(digest);
    }
    let combined = hex_sha256_fields(&digests);
    println!("{} prompts, combined digest {}", prompts.len(), &combined[..16]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use haunt_core::template::Stage;

    #[test]
    fn stage_chain_matches_driver_stage_names() {
        assert_eq!(STAGE_CHAIN[0], Stage::Generate.name());
        assert_eq!(STAGE_CHAIN[1], Stage::Verify.name());
        assert_eq!(STAGE_CHAIN[2], Stage::LieNudge.name());
        assert_eq!(STAGE_CHAIN[3], Stage::Judge.name());
    }
}
