//! Corpus of audit subjects: the items every model is quizzed about.
//!
//! A corpus is an ordered list of domain items (movies, books, or a custom
//! domain) loaded from a CSV file with a mandatory header. All free text is
//! NFC-normalized at load time so that downstream substring matching and
//! deduplication never depend on the byte-level encoding of equivalent
//! characters. Items may point at a reference text file (plot summary,
//! subtitles, source chapter) used for keyword ground-truthing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::digest::canonical_digest;
use crate::error::{Error, Result};

/// The expected CSV header, in order.
pub const CSV_HEADER: [&str; 6] = [
    "item_id",
    "title",
    "domain_kind",
    "subdomain",
    "year",
    "reference_text_ref",
];

/// What kind of thing an item is. The kind drives prompt vocabulary: a
/// movie has "scenes", a book has "moments", and custom domains carry
/// their own noun (e.g. `custom:paper`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DomainKind {
    Movie,
    Book,
    Custom(String),
}

impl DomainKind {
    /// Singular noun used in prompts ("movie", "book", ...).
    pub fn noun(&self) -> &str {
        match self {
            DomainKind::Movie => "movie",
            DomainKind::Book => "book",
            DomainKind::Custom(noun) => noun,
        }
    }

    /// Noun for a memorable part of the item: movies have scenes,
    /// everything else has moments.
    pub fn moment_noun(&self) -> &str {
        match self {
            DomainKind::Movie => "scene",
            _ => "moment",
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainKind::Movie => write!(f, "movie"),
            DomainKind::Book => write!(f, "book"),
            DomainKind::Custom(noun) => write!(f, "custom:{noun}"),
        }
    }
}

impl FromStr for DomainKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "movie" => Ok(DomainKind::Movie),
            "book" => Ok(DomainKind::Book),
            other => match other.strip_prefix("custom:") {
                Some(noun) if !noun.trim().is_empty() => {
                    Ok(DomainKind::Custom(noun.trim().to_string()))
                }
                Some(_) => Err("custom domain kind needs a noun, e.g. `custom:paper`".into()),
                None => Err(format!(
                    "unknown domain_kind `{other}` (expected `movie`, `book`, or `custom:<noun>`)"
                )),
            },
        }
    }
}

impl Serialize for DomainKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DomainKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One audited item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainItem {
    /// Unique, nonempty identifier; stable across runs.
    pub item_id: String,
    /// Display title, nonempty.
    pub title: String,
    pub domain_kind: DomainKind,
    /// Optional grouping tag (e.g. film industry or genre).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdomain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    /// Path to a reference text, relative to the corpus file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_text_ref: Option<PathBuf>,
}

impl DomainItem {
    /// ` (1999)` when a year is known, empty otherwise. Appended to titles
    /// in prompts so models can disambiguate remakes.
    pub fn year_suffix(&self) -> String {
        match self.year {
            Some(y) => format!(" ({y})"),
            None => String::new(),
        }
    }
}

/// An ordered corpus plus the domain noun used in prompt templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub corpus_id: String,
    pub domain_noun: String,
    pub items: Vec<DomainItem>,
    /// Directory that `reference_text_ref` paths are resolved against.
    base_dir: PathBuf,
}

impl Corpus {
    /// Build a corpus in memory (tests, fixtures). Reference paths resolve
    /// against `base_dir`.
    pub fn new(corpus_id: impl Into<String>, items: Vec<DomainItem>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let corpus_id = corpus_id.into();
        if items.is_empty() {
            return Err(Error::EmptyCorpus { path: corpus_id });
        }
        let domain_noun = items[0].domain_kind.noun().to_string();
        Ok(Corpus {
            corpus_id,
            domain_noun,
            items,
            base_dir: base_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, item_id: &str) -> Option<&DomainItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    /// Content digest over the item list; recorded in run manifests so a
    /// resumed run can detect that the corpus changed underneath it.
    pub fn digest(&self) -> Result<String> {
        canonical_digest(&self.items)
    }

    /// Load and NFC-normalize the reference text for an item. `Ok(None)`
    /// means the item simply has no reference text.
    pub fn reference_text(&self, item: &DomainItem) -> Result<Option<String>> {
        let Some(rel) = &item.reference_text_ref else {
            return Ok(None);
        };
        let path = self.base_dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::ReferenceText {
            item_id: item.item_id.clone(),
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let text = String::from_utf8(bytes).map_err(|e| Error::ReferenceText {
            item_id: item.item_id.clone(),
            path: path.display().to_string(),
            detail: format!("not valid UTF-8: {e}"),
        })?;
        Ok(Some(nfc(&text)))
    }
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

fn opt_nfc(s: &str) -> Option<String> {
    let t = s.trim();
    if t.is_empty() {
        None
    } else {
        Some(nfc(t))
    }
}

/// Parse a corpus CSV. The header row is mandatory and must match
/// [`CSV_HEADER`] exactly; every row is validated (nonempty id and title,
/// well-formed kind and year, unique ids, referenced text files present and
/// UTF-8 decodable) before a corpus is returned.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(&display, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;

    let headers = reader
        .headers()
        .map_err(|_| Error::CorpusHeader {
            path: display.clone(),
            expected: CSV_HEADER.join(","),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::CorpusHeader {
            path: display,
            expected: CSV_HEADER.join(","),
        });
    }

    let mut items: Vec<DomainItem> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, counting the header line
        let record = record.map_err(|e| Error::CorpusRow {
            path: display.clone(),
            row,
            detail: e.to_string(),
        })?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        if record.len() != CSV_HEADER.len() {
            return Err(Error::CorpusRow {
                path: display.clone(),
                row,
                detail: format!("expected {} columns, got {}", CSV_HEADER.len(), record.len()),
            });
        }

        let item_id = nfc(field(0));
        if item_id.is_empty() {
            return Err(Error::CorpusRow {
                path: display.clone(),
                row,
                detail: "item_id is empty".into(),
            });
        }
        let title = nfc(field(1));
        if title.is_empty() {
            return Err(Error::CorpusRow {
                path: display.clone(),
                row,
                detail: format!("title is empty for item `{item_id}`"),
            });
        }
        let domain_kind: DomainKind = field(2).parse().map_err(|e| Error::CorpusRow {
            path: display.clone(),
            row,
            detail: e,
        })?;
        let subdomain = opt_nfc(field(3));
        let year = match field(4) {
            "" => None,
            y => Some(y.parse::<i32>().map_err(|_| Error::CorpusRow {
                path: display.clone(),
                row,
                detail: format!("year `{y}` is not an integer"),
            })?),
        };
        let reference_text_ref = match field(5) {
            "" => None,
            p => Some(PathBuf::from(p)),
        };

        if let Some(first) = seen.get(&item_id) {
            return Err(Error::DuplicateItemId {
                path: display,
                item_id,
                first: *first,
                second: row,
            });
        }
        seen.insert(item_id.clone(), row);

        items.push(DomainItem {
            item_id,
            title,
            domain_kind,
            subdomain,
            year,
            reference_text_ref,
        });
    }

    if items.is_empty() {
        return Err(Error::EmptyCorpus { path: display });
    }

    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let corpus_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    let corpus = Corpus {
        corpus_id,
        domain_noun: items[0].domain_kind.noun().to_string(),
        items,
        base_dir,
    };

    // Referenced text files must exist and decode; check now so failures
    // surface at load time instead of deep inside a pipeline stage.
    for item in &corpus.items {
        corpus.reference_text(item)?;
    }

    Ok(corpus)
}

/// Write a corpus back out in the same CSV schema `load_corpus` reads.
/// Loading the result yields an equal corpus (fields are already normalized).
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
    writer.write_record(CSV_HEADER)?;
    for item in &corpus.items {
        writer.write_record([
            item.item_id.as_str(),
            item.title.as_str(),
            &item.domain_kind.to_string(),
            item.subdomain.as_deref().unwrap_or(""),
            &item.year.map(|y| y.to_string()).unwrap_or_default(),
            &item
                .reference_text_ref
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_default(),
        ])?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Fields [`stratify`] understands.
pub const STRATIFY_FIELDS: [&str; 3] = ["subdomain", "domain_kind", "year"];

/// Partition item ids by a tag field. Items without the tag land in an
/// `untagged` bucket; every item appears in exactly one bucket, in corpus
/// order. Unknown fields are an error rather than an empty result.
pub fn stratify(corpus: &Corpus, field: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let tag_of = |item: &DomainItem| -> Option<String> {
        match field {
            "subdomain" => item.subdomain.clone(),
            "domain_kind" => Some(item.domain_kind.to_string()),
            "year" => item.year.map(|y| y.to_string()),
            _ => unreachable!("validated below"),
        }
    };
    if !STRATIFY_FIELDS.contains(&field) {
        return Err(Error::UnknownStratifyField {
            field: field.to_string(),
            known: STRATIFY_FIELDS.join(", "),
        });
    }
    let mut buckets: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for item in &corpus.items {
        let tag = tag_of(item).unwrap_or_else(|| "untagged".into());
        buckets.entry(tag).or_default().push(item.item_id.clone());
    }
    Ok(buckets)
}
