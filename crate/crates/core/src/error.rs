use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the audit pipeline.
///
/// Every variant maps to a stable machine-readable class string (see
/// [`Error::class`]) so that callers — in particular the CLI — can report
/// failures in a scriptable form without string-matching display text.
#[derive(Debug, Error)]
pub enum Error {
    // ---- corpus -------------------------------------------------------
    #[error("corpus file {path} is missing the mandatory header row (expected `{expected}`)")]
    CorpusHeader { path: String, expected: String },

    #[error("corpus row {row} in {path}: {detail}")]
    CorpusRow {
        path: String,
        row: usize,
        detail: String,
    },

    #[error("duplicate item_id `{item_id}` in {path} (rows {first} and {second})")]
    DuplicateItemId {
        path: String,
        item_id: String,
        first: usize,
        second: usize,
    },

    #[error("corpus {path} contains no items")]
    EmptyCorpus { path: String },

    #[error("cannot stratify by `{field}`; known fields: {known}")]
    UnknownStratifyField { field: String, known: String },

    #[error("reference text for item `{item_id}` ({path}): {detail}")]
    ReferenceText {
        item_id: String,
        path: String,
        detail: String,
    },

    // ---- templates ----------------------------------------------------
    #[error("no template registered for `{name}`")]
    MissingTemplate { name: String },

    #[error("template `{name}` uses placeholder {{{placeholder}}} which has no binding")]
    UnboundPlaceholder { name: String, placeholder: String },

    // ---- provider -----------------------------------------------------
    #[error("credential variable {var} for model `{model_key}` is unset or empty")]
    MissingCredential { var: String, model_key: String },

    #[error("authentication rejected for model `{model_key}` (HTTP {status}); not retried")]
    AuthRejected { model_key: String, status: u16 },

    #[error(
        "model `{model_key}` still failing after {attempts} attempts; last error: {last_error}"
    )]
    RetriesExhausted {
        model_key: String,
        attempts: u32,
        last_error: String,
    },

    #[error("model `{model_key}` returned an unexpected payload: {detail}")]
    MalformedVendorPayload { model_key: String, detail: String },

    #[error("model `{model_key}` rejected the request (HTTP {status}): {body}")]
    VendorStatus {
        model_key: String,
        status: u16,
        body: String,
    },

    #[error("chat turn {index} has empty content (model `{model_key}`)")]
    EmptyTurnContent { model_key: String, index: usize },

    #[error("mock script has no rule matching request {request_hash} (model `{model_key}`, last user turn starts: {excerpt:?})")]
    UnscriptedRequest {
        model_key: String,
        request_hash: String,
        excerpt: String,
    },

    #[error("mock script {path} line {line}: {detail}")]
    MockScript {
        path: String,
        line: usize,
        detail: String,
    },

    // ---- store --------------------------------------------------------
    #[error("run `{run_id}` not found under {root}")]
    UnknownRun { run_id: String, root: String },

    #[error("run `{run_id}` already exists but its manifest disagrees on {field} (manifest {manifest}, caller {caller}); start a fresh run id")]
    ManifestMismatch {
        run_id: String,
        field: String,
        manifest: String,
        caller: String,
    },

    #[error("record store corruption in {path} line {line}: {detail}")]
    StoreCorruption {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("record schema version {found} in {path} is newer than supported version {supported}")]
    SchemaVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    // ---- pipeline stages ----------------------------------------------
    #[error("reply from `{model_key}` could not be parsed: {detail}")]
    ReplyParse { model_key: String, detail: String },

    #[error("verification prompt for item `{item_id}` needs exactly 4 assertions from one generator, got {detail}")]
    AssertionGroup { item_id: String, detail: String },

    #[error("lie injected into dialogue `{record_id}` was not authored by subject `{subject}`: {detail}")]
    LieProvenance {
        record_id: String,
        subject: String,
        detail: String,
    },

    #[error("stage `{stage}` requires `{missing}` to have completed for run `{run_id}`")]
    DependencyOrder {
        stage: String,
        missing: String,
        run_id: String,
    },

    // ---- judging / calibration ----------------------------------------
    #[error("human label file {path} line {line}: {detail}")]
    LabelFile {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("human labels reference unknown records: {detail}")]
    UnknownLabelTarget { detail: String },

    #[error("no overlap between judge verdicts and human labels; nothing to calibrate")]
    EmptyCalibrationOverlap,

    // ---- keyword ground truth ------------------------------------------
    #[error("keyword spec for concept `{concept}` has an empty keyword list")]
    EmptyKeywords { concept: String },

    #[error("no item in the corpus has a reference text; prevalence for `{concept}` is undefined ({excluded} items excluded)")]
    NoReferenceTexts { concept: String, excluded: usize },

    #[error("no scored predictions overlap the ground truth for `{concept}`")]
    EmptyScoreOverlap { concept: String },

    // ---- analytics -----------------------------------------------------
    #[error("agreement inputs have mismatched lengths ({left} vs {right})")]
    RaterLengthMismatch { left: usize, right: usize },

    #[error("agreement needs at least {needed} raters, got {got}")]
    InsufficientRaters { needed: usize, got: usize },

    #[error("empty input: {detail}")]
    EmptyInput { detail: String },

    // ---- configuration / CLI -------------------------------------------
    #[error("configuration error: {detail}")]
    Config { detail: String },

    #[error("interrupted; in-flight work was drained and persisted")]
    Interrupted,

    // ---- wrapped lower-level failures -----------------------------------
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Http(#[from] reqwest::Error),
}

impl Error {
    /// Wrap an io error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable class for exit reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::CorpusHeader { .. }
            | Error::CorpusRow { .. }
            | Error::DuplicateItemId { .. }
            | Error::EmptyCorpus { .. }
            | Error::UnknownStratifyField { .. }
            | Error::ReferenceText { .. } => "corpus",
            Error::MissingTemplate { .. } | Error::UnboundPlaceholder { .. } => "template",
            Error::MissingCredential { .. } | Error::AuthRejected { .. } => "auth",
            Error::RetriesExhausted { .. }
            | Error::MalformedVendorPayload { .. }
            | Error::VendorStatus { .. }
            | Error::Http(_) => "provider",
            Error::EmptyTurnContent { .. } => "request",
            Error::UnscriptedRequest { .. } | Error::MockScript { .. } => "mock",
            Error::UnknownRun { .. }
            | Error::ManifestMismatch { .. }
            | Error::StoreCorruption { .. }
            | Error::SchemaVersion { .. } => "store",
            Error::ReplyParse { .. } | Error::AssertionGroup { .. } => "parse",
            Error::LieProvenance { .. } => "provenance",
            Error::DependencyOrder { .. } => "dependency",
            Error::LabelFile { .. }
            | Error::UnknownLabelTarget { .. }
            | Error::EmptyCalibrationOverlap => "labels",
            Error::EmptyKeywords { .. }
            | Error::NoReferenceTexts { .. }
            | Error::EmptyScoreOverlap { .. } => "ground-truth",
            Error::RaterLengthMismatch { .. }
            | Error::InsufficientRaters { .. }
            | Error::EmptyInput { .. } => "analytics",
            Error::Config { .. } => "config",
            Error::Interrupted => "interrupted",
            Error::Io { .. } => "io",
            Error::Json(_) => "serialization",
            Error::Csv(_) => "serialization",
        }
    }
}
