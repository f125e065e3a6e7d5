//! Append-only record store underneath every run.
//!
//! Each run owns a directory holding an immutable manifest, a stage
//! completion ledger, and one JSONL file per record kind. Every line is an
//! envelope carrying a schema version, the run id, a per-kind sequence
//! number, and a digest of the canonical payload encoding, so corruption is
//! detected on the next open rather than surfacing as skewed statistics.
//!
//! Appends are idempotent: every record kind declares a natural dedupe key
//! (an exchange's request hash, an assertion's id, ...) and appending a key
//! that is already present is acknowledged as a cache hit without writing.
//! Appends are durable before they return — the line is flushed and synced,
//! so a process kill immediately after an acknowledged append cannot lose
//! it. A kill *during* an append leaves a torn final line, which the next
//! open detects and truncates away.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::canonical_digest;
use crate::error::{Error, Result};

/// On-disk schema version for record envelopes.
pub const SCHEMA_VERSION: u32 = 1;

/// Every kind of record a run can persist, each in its own JSONL file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Verbatim request/response pair with a provider.
    Exchange,
    /// One labeled truth or lie authored by a generator model.
    Assertion,
    /// One model's true/false/idk ruling on one assertion.
    Verdict,
    /// A complete multi-turn dialogue transcript with stage outcomes.
    Dialogue,
    /// A judge model's label for one dialogue stage.
    JudgeVerdict,
    /// Keyword-derived ground truth for one item.
    GroundTruth,
    /// A task that failed permanently (e.g. unparseable after retry).
    Failure,
}

impl RecordKind {
    pub const ALL: [RecordKind; 7] = [
        RecordKind::Exchange,
        RecordKind::Assertion,
        RecordKind::Verdict,
        RecordKind::Dialogue,
        RecordKind::JudgeVerdict,
        RecordKind::GroundTruth,
        RecordKind::Failure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Exchange => "exchange",
            RecordKind::Assertion => "assertion",
            RecordKind::Verdict => "verdict",
            RecordKind::Dialogue => "dialogue",
            RecordKind::JudgeVerdict => "judge_verdict",
            RecordKind::GroundTruth => "ground_truth",
            RecordKind::Failure => "failure",
        }
    }

    fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A payload type that can live in the store.
pub trait StoreRecord: Serialize + DeserializeOwned {
    const KIND: RecordKind;

    /// Natural idempotence key. Appending two records with the same key is
    /// one write and one cache hit, regardless of payload differences — the
    /// first write wins, which is exactly the resume semantics the
    /// pipelines need.
    fn dedupe_key(&self) -> String;
}

/// One line of a record file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub run: String,
    pub seq: u64,
    pub kind: RecordKind,
    /// Digest of the canonical JSON encoding of `payload`.
    pub digest: String,
    pub payload: Value,
}

/// Permanent task failure, persisted so reruns can skip known-bad tasks and
/// reports can count them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    /// Stable identifier of the failed unit of work, e.g. `item:model`.
    pub task_key: String,
    /// Machine-readable failure class (`parse`, `refusal`, `provider`, ...).
    pub class: String,
    pub detail: String,
}

impl StoreRecord for FailureRecord {
    const KIND: RecordKind = RecordKind::Failure;

    fn dedupe_key(&self) -> String {
        format!("{}:{}", self.stage, self.task_key)
    }
}

/// Identity of a run, written once at creation and never modified.
/// Resuming a run with a different corpus, roster, or template set is
/// refused so that every record in the store stays attributable to the
/// inputs named here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub corpus_digest: String,
    /// model_key -> digest of its resolved spec.
    pub roster_digest: BTreeMap<String, String>,
    /// stage name -> combined template version.
    pub template_versions: BTreeMap<String, String>,
    /// Snapshot of the configuration the run was created with.
    pub config: Value,
}

/// The identity fields checked when re-opening an existing run.
#[derive(Debug, Clone)]
pub struct RunIdentity {
    pub corpus_digest: String,
    pub roster_digest: BTreeMap<String, String>,
    pub template_versions: BTreeMap<String, String>,
    pub config: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMark {
    pub completed_at: String,
    pub summary: Value,
}

#[derive(Debug, Clone, Copy)]
pub struct AppendOutcome {
    pub seq: u64,
    /// False when the dedupe key was already present (idempotent replay).
    pub fresh: bool,
}

struct KindState {
    file: File,
    next_seq: u64,
    /// dedupe key -> seq of the first record with that key.
    keys: HashMap<String, u64>,
    /// Payloads kept in memory for cheap keyed lookup. Only populated for
    /// kinds in [`CACHED_KINDS`]; other kinds are read back from disk.
    payloads: HashMap<String, Value>,
}

/// Kinds whose payloads stay in memory for keyed lookup on the hot path
/// (the provider consults the exchange cache before every call).
const CACHED_KINDS: [RecordKind; 1] = [RecordKind::Exchange];

struct Inner {
    kinds: BTreeMap<RecordKind, KindState>,
}

/// Handle to one run's record store. Cheap to share behind an `Arc`;
/// appends are serialized internally.
pub struct RunStore {
    run_id: String,
    dir: PathBuf,
    manifest: RunManifest,
    inner: Mutex<Inner>,
}

impl fmt::Debug for RunStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunStore")
            .field("run_id", &self.run_id)
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

impl RunStore {
    /// Create a new run directory, or re-open an existing one after
    /// verifying that the caller's corpus/roster/templates match the
    /// manifest (config may differ across resumes; the original snapshot is
    /// kept).
    pub fn create_or_open(root: impl AsRef<Path>, run_id: &str, identity: RunIdentity) -> Result<Self> {
        let dir = root.as_ref().join(run_id);
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() {
            let store = Self::open(root, run_id)?;
            store.check_identity(&identity)?;
            return Ok(store);
        }
        std::fs::create_dir_all(dir.join("records"))
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        let manifest = RunManifest {
            run_id: run_id.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
            corpus_digest: identity.corpus_digest,
            roster_digest: identity.roster_digest,
            template_versions: identity.template_versions,
            config: identity.config,
        };
        atomic_write_json(&manifest_path, &manifest)?;
        let inner = Inner {
            kinds: Self::open_kind_files(&dir, run_id)?,
        };
        Ok(RunStore {
            run_id: run_id.to_string(),
            dir,
            manifest,
            inner: Mutex::new(inner),
        })
    }

    /// Open an existing run without identity checks (read-mostly stages
    /// like stats and report, which take the store as it is).
    pub fn open(root: impl AsRef<Path>, run_id: &str) -> Result<Self> {
        let dir = root.as_ref().join(run_id);
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::UnknownRun {
                run_id: run_id.to_string(),
                root: root.as_ref().display().to_string(),
            });
        }
        let manifest: RunManifest = read_json(&manifest_path)?;
        let inner = Inner {
            kinds: Self::open_kind_files(&dir, run_id)?,
        };
        Ok(RunStore {
            run_id: run_id.to_string(),
            dir,
            manifest,
            inner: Mutex::new(inner),
        })
    }

    fn check_identity(&self, identity: &RunIdentity) -> Result<()> {
        let mismatch = |field: &str, manifest: String, caller: String| Error::ManifestMismatch {
            run_id: self.run_id.clone(),
            field: field.to_string(),
            manifest,
            caller,
        };
        if identity.corpus_digest != self.manifest.corpus_digest {
            return Err(mismatch(
                "corpus_digest",
                self.manifest.corpus_digest.clone(),
                identity.corpus_digest.clone(),
            ));
        }
        if identity.roster_digest != self.manifest.roster_digest {
            return Err(mismatch(
                "roster_digest",
                format!("{:?}", self.manifest.roster_digest),
                format!("{:?}", identity.roster_digest),
            ));
        }
        if identity.template_versions != self.manifest.template_versions {
            return Err(mismatch(
                "template_versions",
                format!("{:?}", self.manifest.template_versions),
                format!("{:?}", identity.template_versions),
            ));
        }
        Ok(())
    }

    fn open_kind_files(dir: &Path, run_id: &str) -> Result<BTreeMap<RecordKind, KindState>> {
        let records_dir = dir.join("records");
        std::fs::create_dir_all(&records_dir)
            .map_err(|e| Error::io(records_dir.display().to_string(), e))?;
        let mut kinds = BTreeMap::new();
        for kind in RecordKind::ALL {
            let path = records_dir.join(kind.file_name());
            let (next_seq, keys, payloads) = Self::recover_file(&path, run_id, kind)?;
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            kinds.insert(
                kind,
                KindState {
                    file,
                    next_seq,
                    keys,
                    payloads,
                },
            );
        }
        Ok(kinds)
    }

    /// Scan one record file: verify envelope digests and sequencing,
    /// truncate a torn final line, and build the in-memory key index.
    #[allow(clippy::type_complexity)]
    fn recover_file(
        path: &Path,
        run_id: &str,
        kind: RecordKind,
    ) -> Result<(u64, HashMap<String, u64>, HashMap<String, Value>)> {
        let mut keys = HashMap::new();
        let mut payloads = HashMap::new();
        if !path.exists() {
            return Ok((0, keys, payloads));
        }
        let display = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
        let cache_payloads = CACHED_KINDS.contains(&kind);

        let mut next_seq = 0u64;
        let mut good_end = 0usize; // byte offset just past the last intact line
        let mut line_no = 0usize;
        let mut start = 0usize;
        while start < bytes.len() {
            let Some(nl) = bytes[start..].iter().position(|&b| b == b'\n') else {
                // No terminating newline: a torn append. Drop the suffix.
                log::warn!(
                    "truncating torn trailing line in {display} ({} bytes)",
                    bytes.len() - start
                );
                break;
            };
            line_no += 1;
            let line = &bytes[start..start + nl];
            let envelope: Envelope =
                serde_json::from_slice(line).map_err(|e| Error::StoreCorruption {
                    path: display.clone(),
                    line: line_no,
                    detail: format!("not a valid envelope: {e}"),
                })?;
            if envelope.v > SCHEMA_VERSION {
                return Err(Error::SchemaVersion {
                    path: display,
                    found: envelope.v,
                    supported: SCHEMA_VERSION,
                });
            }
            if envelope.run != run_id {
                return Err(Error::StoreCorruption {
                    path: display,
                    line: line_no,
                    detail: format!("record belongs to run `{}`", envelope.run),
                });
            }
            if envelope.kind != kind {
                return Err(Error::StoreCorruption {
                    path: display,
                    line: line_no,
                    detail: format!("record kind `{}` in the {kind} file", envelope.kind),
                });
            }
            if envelope.seq != next_seq {
                return Err(Error::StoreCorruption {
                    path: display,
                    line: line_no,
                    detail: format!("sequence gap: expected {next_seq}, found {}", envelope.seq),
                });
            }
            let digest = canonical_digest(&envelope.payload)?;
            if digest != envelope.digest {
                return Err(Error::StoreCorruption {
                    path: display,
                    line: line_no,
                    detail: "payload digest mismatch (record altered on disk)".into(),
                });
            }
            let key = dedupe_key_of(kind, &envelope.payload).ok_or_else(|| Error::StoreCorruption {
                path: display.clone(),
                line: line_no,
                detail: "payload is missing its dedupe key field".into(),
            })?;
            keys.entry(key.clone()).or_insert(envelope.seq);
            if cache_payloads {
                payloads.entry(key).or_insert(envelope.payload);
            }
            next_seq += 1;
            start += nl + 1;
            good_end = start;
        }

        if good_end < bytes.len() {
            let file = OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(|e| Error::io(&display, e))?;
            file.set_len(good_end as u64)
                .map_err(|e| Error::io(&display, e))?;
            file.sync_all().map_err(|e| Error::io(&display, e))?;
        }

        Ok((next_seq, keys, payloads))
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn run_dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Append a record, or acknowledge an existing one. The write is synced
    /// to disk before this returns.
    pub fn append<T: StoreRecord>(&self, record: &T) -> Result<AppendOutcome> {
        let payload = serde_json::to_value(record)?;
        let key = record.dedupe_key();
        let mut inner = self.inner.lock().expect("store lock poisoned");
        let state = inner.kinds.get_mut(&T::KIND).expect("all kinds opened");
        if let Some(&seq) = state.keys.get(&key) {
            return Ok(AppendOutcome { seq, fresh: false });
        }
        let envelope = Envelope {
            v: SCHEMA_VERSION,
            run: self.run_id.clone(),
            seq: state.next_seq,
            kind: T::KIND,
            digest: canonical_digest(&payload)?,
            payload,
        };
        let mut line = serde_json::to_string(&envelope)?;
        line.push('\n');
        let path = || {
            self.dir
                .join("records")
                .join(T::KIND.file_name())
                .display()
                .to_string()
        };
        state
            .file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(path(), e))?;
        state.file.sync_data().map_err(|e| Error::io(path(), e))?;
        let seq = envelope.seq;
        state.next_seq += 1;
        state.keys.insert(key.clone(), seq);
        if CACHED_KINDS.contains(&T::KIND) {
            state.payloads.insert(key, envelope.payload);
        }
        Ok(AppendOutcome { seq, fresh: true })
    }

    /// True if a record with this dedupe key exists.
    pub fn has_key(&self, kind: RecordKind, key: &str) -> bool {
        let inner = self.inner.lock().expect("store lock poisoned");
        inner.kinds[&kind].keys.contains_key(key)
    }

    pub fn count(&self, kind: RecordKind) -> usize {
        let inner = self.inner.lock().expect("store lock poisoned");
        inner.kinds[&kind].keys.len()
    }

    /// Keyed payload lookup for kinds with an in-memory cache.
    pub fn cached_payload(&self, kind: RecordKind, key: &str) -> Option<Value> {
        let inner = self.inner.lock().expect("store lock poisoned");
        inner.kinds[&kind].payloads.get(key).cloned()
    }

    /// Load all records of a type in sequence order.
    pub fn load<T: StoreRecord>(&self) -> Result<Vec<T>> {
        Ok(self
            .envelopes(T::KIND)?
            .into_iter()
            .map(|e| serde_json::from_value(e.payload))
            .collect::<std::result::Result<_, _>>()?)
    }

    /// Raw envelopes of one kind in sequence order.
    pub fn envelopes(&self, kind: RecordKind) -> Result<Vec<Envelope>> {
        // Hold the lock while reading so a concurrent append cannot leave a
        // half-written final line in view.
        let _guard = self.inner.lock().expect("store lock poisoned");
        let path = self.dir.join("records").join(kind.file_name());
        if !path.exists() {
            return Ok(Vec::new());
        }
        let display = path.display().to_string();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&display, e))?;
        let mut out = Vec::new();
        for line in bytes.split(|&b| b == b'\n') {
            if line.is_empty() {
                continue;
            }
            out.push(serde_json::from_slice::<Envelope>(line)?);
        }
        Ok(out)
    }

    // ---- stage completion ledger ---------------------------------------

    fn stages_path(&self) -> PathBuf {
        self.dir.join("stages.json")
    }

    pub fn stage_marks(&self) -> Result<BTreeMap<String, StageMark>> {
        let path = self.stages_path();
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        read_json(&path)
    }

    pub fn stage_complete(&self, stage: &str) -> bool {
        self.stage_marks()
            .map(|m| m.contains_key(stage))
            .unwrap_or(false)
    }

    /// Record that a stage ran to completion over its full task list.
    /// Overwrites any previous mark for the same stage (a rerun refreshes
    /// the summary; completion is idempotent).
    pub fn mark_stage_complete(&self, stage: &str, summary: Value) -> Result<()> {
        let mut marks = self.stage_marks()?;
        marks.insert(
            stage.to_string(),
            StageMark {
                completed_at: chrono::Utc::now().to_rfc3339(),
                summary,
            },
        );
        atomic_write_json(&self.stages_path(), &marks)
    }

    /// Fail unless `dependency` completed before `stage` runs.
    pub fn require_stage(&self, stage: &str, dependency: &str) -> Result<()> {
        if !self.stage_complete(dependency) {
            return Err(Error::DependencyOrder {
                stage: stage.to_string(),
                missing: dependency.to_string(),
                run_id: self.run_id.clone(),
            });
        }
        Ok(())
    }
}

/// Extract the dedupe key from a raw payload, mirroring each record type's
/// `StoreRecord::dedupe_key`. Used during recovery, where payloads are
/// still untyped.
fn dedupe_key_of(kind: RecordKind, payload: &Value) -> Option<String> {
    let s = |field: &str| payload.get(field)?.as_str().map(str::to_string);
    let u = |field: &str| payload.get(field)?.as_u64().map(|n| n.to_string());
    match kind {
        RecordKind::Exchange => s("request_hash"),
        RecordKind::Assertion => s("assertion_id"),
        RecordKind::Verdict => Some(format!(
            "{}:{}",
            s("assertion_id")?,
            s("verifier_model_key")?
        )),
        RecordKind::Dialogue => s("record_id"),
        RecordKind::JudgeVerdict => Some(format!(
            "{}:{}:{}",
            s("target_record_id")?,
            u("stage_index")?,
            s("judge_model_key")?
        )),
        RecordKind::GroundTruth => Some(format!("{}:{}", s("item_id")?, s("concept")?)),
        RecordKind::Failure => Some(format!("{}:{}", s("stage")?, s("task_key")?)),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Write JSON via a temp file and rename, so readers never observe a
/// half-written file.
pub fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let display = path.display().to_string();
    let tmp = path.with_extension("tmp");
    let data = serde_json::to_vec_pretty(value)?;
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(&data)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.sync_all()
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(display, e))?;
    Ok(())
}
