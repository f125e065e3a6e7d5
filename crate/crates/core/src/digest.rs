//! Content digests used for identifiers, cache keys, and store integrity.
//!
//! Identifiers derived here must stay stable across releases: record ids and
//! request hashes are persisted and reused to resume interrupted runs, so the
//! hashing scheme is part of the on-disk format. Multi-field hashes are
//! length-prefixed to rule out ambiguity between field boundaries.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Hex sha-256 of raw bytes.
pub fn hex_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex sha-256 over a sequence of fields, each length-prefixed so that
/// `["ab", "c"]` and `["a", "bc"]` hash differently.
pub fn hex_sha256_fields<I, S>(fields: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for field in fields {
        let bytes = field.as_ref();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hex::encode(hasher.finalize())
}

/// Short (16 hex char) identifier over length-prefixed fields. Used for
/// record ids where a full 64-char digest would dominate every report line.
pub fn short_id<I, S>(fields: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut id = hex_sha256_fields(fields);
    id.truncate(16);
    id
}

/// Canonical JSON encoding of a serializable value: object keys sorted,
/// no insignificant whitespace. Two structurally equal values encode to
/// identical bytes, which makes the digest usable as an equality check.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // Round-trip through `serde_json::Value`, whose object representation
    // is a sorted map, so key order in the source struct does not leak in.
    let value = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&value)?)
}

/// Hex sha-256 of the canonical JSON encoding of `value`.
pub fn canonical_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex_sha256(canonical_json(value)?.as_bytes()))
}
