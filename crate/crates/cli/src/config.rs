//! Run configuration: one declarative TOML file plus flag overrides.
//!
//! Paths inside the config file resolve relative to the file's directory so
//! a checked-in config works from any working directory; paths given on the
//! command line resolve relative to the invocation as usual. Credentials
//! never appear here — model specs name an environment variable instead.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use haunt_core::digest::canonical_digest;
use haunt_core::provider::ModelSpec;
use haunt_core::report::DEFAULT_CONTRAST_TOP_K;
use haunt_core::{Error, Result};

/// Config file searched for when `--config` is not given.
pub const DEFAULT_CONFIG: &str = "haunt.toml";

const DEFAULT_OUT: &str = "runs";
const DEFAULT_RUN_ID: &str = "default";
const DEFAULT_CONCURRENCY: usize = 4;

/// On-disk configuration. Every field is optional; flags fill the gaps and
/// take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    corpus: Option<PathBuf>,
    roster: Option<PathBuf>,
    out: Option<PathBuf>,
    run_id: Option<String>,
    concurrency: Option<usize>,
    templates: Option<PathBuf>,
    mock_script: Option<PathBuf>,
    judge: Option<String>,
    concept: Option<String>,
    keywords: Option<PathBuf>,
    labels: Option<PathBuf>,
    contrast_top_k: Option<usize>,
}

/// Effective settings after merging the config file with flag overrides.
/// The corpus and roster paths stay optional until a command needs them, so
/// commands that only touch one input don't demand the other.
#[derive(Debug, Clone)]
pub struct Settings {
    corpus: Option<PathBuf>,
    roster: Option<PathBuf>,
    pub out: PathBuf,
    pub run_id: String,
    pub concurrency: usize,
    pub templates: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub judge: Option<String>,
    pub concept: Option<String>,
    pub keywords: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub contrast_top_k: usize,
    pub dry_run: bool,
}

/// Flag values that override the config file (all optional).
#[derive(Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub run_id: Option<String>,
    pub corpus: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub judge: Option<String>,
    pub concurrency: Option<usize>,
    pub mock_script: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dry_run: bool,
}

impl Settings {
    /// Loads the config file (if any) and applies flag overrides.
    pub fn resolve(flags: Overrides) -> Result<Settings> {
        let (file, base_dir) = match &flags.config {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::Config {
                        detail: format!("config file {} not found", path.display()),
                    });
                }
                (parse_file(path)?, parent_of(path))
            }
            None => {
                let default = Path::new(DEFAULT_CONFIG);
                if default.is_file() {
                    (parse_file(default)?, parent_of(default))
                } else {
                    (FileConfig::default(), PathBuf::new())
                }
            }
        };
        let rebase = |p: PathBuf| -> PathBuf {
            if p.is_absolute() || base_dir.as_os_str().is_empty() {
                p
            } else {
                base_dir.join(p)
            }
        };

        Ok(Settings {
            corpus: flags.corpus.or_else(|| file.corpus.map(&rebase)),
            roster: flags.models.or_else(|| file.roster.map(&rebase)),
            out: flags
                .out
                .or_else(|| file.out.map(&rebase))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            run_id: flags
                .run_id
                .or(file.run_id)
                .unwrap_or_else(|| DEFAULT_RUN_ID.into()),
            concurrency: flags
                .concurrency
                .or(file.concurrency)
                .unwrap_or(DEFAULT_CONCURRENCY),
            templates: file.templates.map(&rebase),
            mock_script: flags.mock_script.or_else(|| file.mock_script.map(&rebase)),
            judge: flags.judge.or(file.judge),
            concept: file.concept,
            keywords: file.keywords.map(&rebase),
            labels: file.labels.map(&rebase),
            contrast_top_k: file.contrast_top_k.unwrap_or(DEFAULT_CONTRAST_TOP_K),
            dry_run: flags.dry_run,
        })
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus.as_deref().ok_or_else(|| Error::Config {
            detail: "no corpus configured: set `corpus` in the config file or pass --corpus"
                .into(),
        })
    }

    pub fn roster_path(&self) -> Result<&Path> {
        self.roster.as_deref().ok_or_else(|| Error::Config {
            detail: "no roster configured: set `roster` in the config file or pass --models"
                .into(),
        })
    }
}

fn parse_file(path: &Path) -> Result<FileConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| Error::Config {
        detail: format!("config file {}: {e}", path.display()),
    })
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

// ---- model roster -----------------------------------------------------------

/// One roster entry: a model spec plus whether the model is audited.
/// Non-audited entries (typically the judge) are addressable by key but do
/// not generate, verify, or face the nudges.
#[derive(Debug, Deserialize)]
struct RosterEntry {
    #[serde(flatten)]
    spec: ModelSpec,
    #[serde(default = "default_true")]
    audited: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RosterFile {
    models: Vec<RosterEntry>,
}

/// The loaded roster: audited models in file order, everything by key.
#[derive(Debug, Clone)]
pub struct Roster {
    pub audited: Vec<ModelSpec>,
    all: BTreeMap<String, ModelSpec>,
}

impl Roster {
    pub fn load(path: &Path) -> Result<Roster> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: RosterFile = toml::from_str(&text).map_err(|e| Error::Config {
            detail: format!("roster file {}: {e}", path.display()),
        })?;
        if file.models.is_empty() {
            return Err(Error::Config {
                detail: format!("roster file {} lists no models", path.display()),
            });
        }
        let mut audited = Vec::new();
        let mut all = BTreeMap::new();
        for entry in file.models {
            let key = entry.spec.model_key.clone();
            if key.is_empty() {
                return Err(Error::Config {
                    detail: format!("roster file {}: a model has an empty key", path.display()),
                });
            }
            if all.insert(key.clone(), entry.spec.clone()).is_some() {
                return Err(Error::Config {
                    detail: format!("roster file {}: duplicate model key `{key}`", path.display()),
                });
            }
            if entry.audited {
                audited.push(entry.spec);
            }
        }
        Ok(Roster { audited, all })
    }

    pub fn get(&self, key: &str) -> Result<&ModelSpec> {
        self.all.get(key).ok_or_else(|| Error::Config {
            detail: format!("model key `{key}` is not in the roster"),
        })
    }

    /// Audited model keys in roster order; this order fixes generator
    /// columns in reports.
    pub fn audited_keys(&self) -> Vec<String> {
        self.audited.iter().map(|m| m.model_key.clone()).collect()
    }

    /// Per-model content digest, part of the run identity: resuming a run
    /// with a changed roster is an error, not silent mixing.
    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for (key, spec) in &self.all {
            map.insert(key.clone(), canonical_digest(spec)?);
        }
        Ok(map)
    }
}
