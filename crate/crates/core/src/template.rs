//! Prompt templates with content-derived versions.
//!
//! Every prompt sent to a model is rendered from a named template. A
//! template's version is a digest of its text, and versions participate in
//! request cache keys and run manifests: edit a template and previously
//! cached exchanges no longer match, so the pipeline re-asks instead of
//! silently reusing replies produced by older wording.
//!
//! Built-in defaults are compiled in; a directory of `<name>.txt` files can
//! override any subset of them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::digest::{hex_sha256, hex_sha256_fields};
use crate::error::{Error, Result};

/// Every prompt the pipeline can render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateKind {
    /// Ask a model for two truths and two lies about an item.
    Generation,
    /// Stricter re-ask after an unparseable generation reply.
    GenerationRetry,
    /// Present four unlabeled assertions for true/false/idk verification.
    Verification,
    /// Opening familiarity probe shared by both dialogue protocols.
    Familiarity,
    /// Announce that the user has two favorite moments to share.
    LieNudgeSetup,
    /// Present the first lie as the user's favorite moment.
    LieNudgeFirst,
    /// Present the second lie.
    LieNudgeSecond,
    /// Ask for the model's favorite character and moment.
    RefNudgeFavorite,
    /// Implicitly suggest a moment referencing the concept exists.
    RefNudgeFirst,
    /// Insist on an explicit reference to the concept.
    RefNudgeSecond,
    /// Judge: did the subject agree with an injected claim?
    JudgeLieAgreement,
    /// Judge: did the subject affirm a suggested reference exists?
    JudgeReferenceAffirmation,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 12] = [
        TemplateKind::Generation,
        TemplateKind::GenerationRetry,
        TemplateKind::Verification,
        TemplateKind::Familiarity,
        TemplateKind::LieNudgeSetup,
        TemplateKind::LieNudgeFirst,
        TemplateKind::LieNudgeSecond,
        TemplateKind::RefNudgeFavorite,
        TemplateKind::RefNudgeFirst,
        TemplateKind::RefNudgeSecond,
        TemplateKind::JudgeLieAgreement,
        TemplateKind::JudgeReferenceAffirmation,
    ];

    /// File stem used for overrides and report keys.
    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Generation => "generation",
            TemplateKind::GenerationRetry => "generation_retry",
            TemplateKind::Verification => "verification",
            TemplateKind::Familiarity => "familiarity",
            TemplateKind::LieNudgeSetup => "lie_nudge_setup",
            TemplateKind::LieNudgeFirst => "lie_nudge_first",
            TemplateKind::LieNudgeSecond => "lie_nudge_second",
            TemplateKind::RefNudgeFavorite => "ref_nudge_favorite",
            TemplateKind::RefNudgeFirst => "ref_nudge_first",
            TemplateKind::RefNudgeSecond => "ref_nudge_second",
            TemplateKind::JudgeLieAgreement => "judge_lie_agreement",
            TemplateKind::JudgeReferenceAffirmation => "judge_reference_affirmation",
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TemplateKind::Generation => include_str!("../templates/generation.txt"),
            TemplateKind::GenerationRetry => include_str!("../templates/generation_retry.txt"),
            TemplateKind::Verification => include_str!("../templates/verification.txt"),
            TemplateKind::Familiarity => include_str!("../templates/familiarity.txt"),
            TemplateKind::LieNudgeSetup => include_str!("../templates/lie_nudge_setup.txt"),
            TemplateKind::LieNudgeFirst => include_str!("../templates/lie_nudge_first.txt"),
            TemplateKind::LieNudgeSecond => include_str!("../templates/lie_nudge_second.txt"),
            TemplateKind::RefNudgeFavorite => include_str!("../templates/ref_nudge_favorite.txt"),
            TemplateKind::RefNudgeFirst => include_str!("../templates/ref_nudge_first.txt"),
            TemplateKind::RefNudgeSecond => include_str!("../templates/ref_nudge_second.txt"),
            TemplateKind::JudgeLieAgreement => include_str!("../templates/judge_lie_agreement.txt"),
            TemplateKind::JudgeReferenceAffirmation => {
                include_str!("../templates/judge_reference_affirmation.txt")
            }
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pipeline stages that carry a template version into request hashes and
/// the run manifest. A stage's version covers every template it renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Generate,
    Verify,
    LieNudge,
    RefNudge,
    Judge,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Generate,
        Stage::Verify,
        Stage::LieNudge,
        Stage::RefNudge,
        Stage::Judge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Verify => "verify",
            Stage::LieNudge => "nudge",
            Stage::RefNudge => "refnudge",
            Stage::Judge => "judge",
        }
    }

    /// Templates whose text feeds this stage's version.
    pub fn templates(self) -> &'static [TemplateKind] {
        match self {
            Stage::Generate => &[TemplateKind::Generation, TemplateKind::GenerationRetry],
            Stage::Verify => &[TemplateKind::Verification],
            Stage::LieNudge => &[
                TemplateKind::Familiarity,
                TemplateKind::LieNudgeSetup,
                TemplateKind::LieNudgeFirst,
                TemplateKind::LieNudgeSecond,
            ],
            Stage::RefNudge => &[
                TemplateKind::Familiarity,
                TemplateKind::RefNudgeFavorite,
                TemplateKind::RefNudgeFirst,
                TemplateKind::RefNudgeSecond,
            ],
            Stage::Judge => &[
                TemplateKind::JudgeLieAgreement,
                TemplateKind::JudgeReferenceAffirmation,
            ],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
struct Template {
    text: String,
    version: String,
}

impl Template {
    fn new(text: String) -> Self {
        let version = short_version(&text);
        Template { text, version }
    }
}

fn short_version(text: &str) -> String {
    let mut v = hex_sha256(text.as_bytes());
    v.truncate(12);
    v
}

/// A resolved set of templates (builtin, possibly overridden from disk).
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKind, Template>,
}

impl TemplateSet {
    /// The compiled-in defaults.
    pub fn builtin() -> Self {
        let templates = TemplateKind::ALL
            .into_iter()
            .map(|k| (k, Template::new(k.builtin_text().to_string())))
            .collect();
        TemplateSet { templates }
    }

    /// No templates at all; every lookup fails. Useful for exercising the
    /// missing-template error path.
    pub fn empty() -> Self {
        TemplateSet {
            templates: BTreeMap::new(),
        }
    }

    /// Builtin defaults with any `<name>.txt` files in `dir` overriding the
    /// template of the same name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::builtin();
        for kind in TemplateKind::ALL {
            let path = dir.join(format!("{}.txt", kind.name()));
            if path.is_file() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                set.templates.insert(kind, Template::new(text));
            }
        }
        Ok(set)
    }

    pub fn text(&self, kind: TemplateKind) -> Result<&str> {
        self.templates
            .get(&kind)
            .map(|t| t.text.as_str())
            .ok_or_else(|| Error::MissingTemplate {
                name: kind.name().to_string(),
            })
    }

    /// Version (12 hex chars) of one template.
    pub fn version(&self, kind: TemplateKind) -> Result<&str> {
        self.templates
            .get(&kind)
            .map(|t| t.version.as_str())
            .ok_or_else(|| Error::MissingTemplate {
                name: kind.name().to_string(),
            })
    }

    /// Combined version over every template a stage renders.
    pub fn stage_version(&self, stage: Stage) -> Result<String> {
        let mut versions = Vec::new();
        for kind in stage.templates() {
            versions.push(self.version(*kind)?);
        }
        Ok(short_version(&hex_sha256_fields(versions)))
    }

    /// All stage versions, keyed by stage name; stored in run manifests.
    pub fn stage_versions(&self) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for stage in Stage::ALL {
            map.insert(stage.name().to_string(), self.stage_version(stage)?);
        }
        Ok(map)
    }

    /// Substitute `{placeholder}` bindings into a template. Placeholders
    /// with no binding are an error; extra bindings are ignored. Values are
    /// inserted literally — they are never re-scanned for placeholders, so
    /// braces inside model-generated text cannot inject anything.
    pub fn render(&self, kind: TemplateKind, bindings: &[(&str, &str)]) -> Result<String> {
        let text = self.text(kind)?;
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let Some(close) = after.find('}') else {
                // Unterminated brace: treat the remainder as literal text.
                out.push_str(&rest[open..]);
                rest = "";
                break;
            };
            let name = &after[..close];
            if is_placeholder_name(name) {
                match bindings.iter().find(|(k, _)| *k == name) {
                    Some((_, value)) => out.push_str(value),
                    None => {
                        return Err(Error::UnboundPlaceholder {
                            name: kind.name().to_string(),
                            placeholder: name.to_string(),
                        })
                    }
                }
            } else {
                // Not a placeholder (e.g. `{<statement>}` in format examples):
                // keep verbatim.
                out.push_str(&rest[open..open + 1 + close + 1]);
            }
            rest = &after[close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn builtin_set_is_complete_and_versioned() {
        let set = TemplateSet::builtin();
        for kind in TemplateKind::ALL {
            let text = set.text(kind).unwrap();
            assert!(!text.trim().is_empty(), "{kind} is empty");
            let version = set.version(kind).unwrap();
            assert_eq!(version.len(), 12);
        }
    }

    #[test]
    fn render_substitutes_bindings() {
        let set = TemplateSet::builtin();
        let out = set
            .render(
                TemplateKind::Familiarity,
                &[
                    ("domain_noun", "movie"),
                    ("title", "Heat"),
                    ("year_suffix", " (1995)"),
                ],
            )
            .unwrap();
        assert_eq!(out.trim(), "Do you know the movie \"Heat\" (1995)?");
    }

    #[test]
    fn unbound_placeholder_is_an_error() {
        let set = TemplateSet::builtin();
        let err = set
            .render(TemplateKind::Familiarity, &[("title", "Heat")])
            .unwrap_err();
        match err {
            Error::UnboundPlaceholder { placeholder, .. } => {
                assert_eq!(placeholder, "domain_noun")
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn values_are_not_rescanned() {
        let set = TemplateSet::builtin();
        let out = set
            .render(
                TemplateKind::Familiarity,
                &[
                    ("domain_noun", "movie"),
                    ("title", "{year_suffix} literal"),
                    ("year_suffix", ""),
                ],
            )
            .unwrap();
        assert!(out.contains("{year_suffix} literal"));
    }

    #[test]
    fn format_markers_in_examples_survive() {
        // The generation template shows `<statement>` examples; nothing in
        // them is a lowercase_underscore placeholder, so rendering succeeds.
        let set = TemplateSet::builtin();
        let out = set
            .render(
                TemplateKind::Generation,
                &[
                    ("domain_noun", "movie"),
                    ("title", "Heat"),
                    ("year_suffix", ""),
                    ("moment_noun", "scene"),
                ],
            )
            .unwrap();
        assert!(out.contains("TRUTH 1: <statement>"));
        assert!(out.contains("LIE 2: <statement>"));
    }

    #[test]
    fn missing_template_error_names_it() {
        let set = TemplateSet::empty();
        match set.text(TemplateKind::Verification).unwrap_err() {
            Error::MissingTemplate { name } => assert_eq!(name, "verification"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn dir_override_changes_only_that_version() {
        let builtin = TemplateSet::builtin();
        let dir = tempfile::tempdir().unwrap();
        let mut f = std::fs::File::create(dir.path().join("familiarity.txt")).unwrap();
        f.write_all(b"Have you seen the {domain_noun} {title}{year_suffix}?")
            .unwrap();
        let set = TemplateSet::from_dir(dir.path()).unwrap();
        assert_ne!(
            set.version(TemplateKind::Familiarity).unwrap(),
            builtin.version(TemplateKind::Familiarity).unwrap()
        );
        assert_eq!(
            set.version(TemplateKind::Generation).unwrap(),
            builtin.version(TemplateKind::Generation).unwrap()
        );
        // Stage versions containing the overridden template change too.
        assert_ne!(
            set.stage_version(Stage::LieNudge).unwrap(),
            builtin.stage_version(Stage::LieNudge).unwrap()
        );
        assert_eq!(
            set.stage_version(Stage::Generate).unwrap(),
            builtin.stage_version(Stage::Generate).unwrap()
        );
    }

    #[test]
    fn stage_versions_cover_all_stages() {
        let set = TemplateSet::builtin();
        let versions = set.stage_versions().unwrap();
        assert_eq!(versions.len(), Stage::ALL.len());
        assert!(versions.contains_key("generate"));
        assert!(versions.contains_key("refnudge"));
    }
}
