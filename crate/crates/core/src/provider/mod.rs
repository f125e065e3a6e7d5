//! Chat model access: specs, turns, exchanges, and the provider router.
//!
//! All model traffic flows through [`ProviderRouter::complete`], which
//! enforces three guarantees the rest of the pipeline builds on:
//!
//! 1. **Verbatim capture** — the returned [`ChatExchange`] carries the
//!    response text exactly as the vendor produced it, untrimmed.
//! 2. **Exactly-once persistence** — the exchange is appended to the run
//!    store (keyed on its request hash) before the call returns.
//! 3. **Replay before talk** — a request whose hash is already stored is
//!    answered from the store without contacting the provider, which is
//!    what makes every stage resumable with zero new calls.
//!
//! Per-model rate limits (in-flight cap and minimum spacing) and retry
//! policy (exponential backoff on transient failures, no retries on auth
//! rejection) are owned here too, so pipeline code never needs to think
//! about them.

mod http;
mod limiter;
mod mock;

pub use http::HttpDispatcher;
pub use limiter::ModelLimiter;
pub use mock::{MockMatcher, MockProvider, MockRule};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::{canonical_digest, hex_sha256_fields};
use crate::error::{Error, Result};
use crate::store::{RecordKind, RunStore, StoreRecord};

// ---- request/response types --------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One message in a conversation. Content is always nonempty; the router
/// rejects requests containing empty turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn system(content: impl Into<String>) -> Self {
        ChatTurn {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatTurn {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatTurn {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Which wire dialect a model speaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointProfile {
    /// Bearer-token `messages`-array chat completions. Covers any vendor
    /// exposing this shape (set `base_url` to point away from the default).
    OpenaiChat,
    /// `x-api-key` + versioned messages endpoint with a separate system
    /// field and required max_tokens.
    AnthropicMessages,
    /// `generateContent` with role-tagged `contents` parts.
    GoogleGenerateContent,
    /// Scripted offline provider for tests and dry runs.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimit {
    /// Maximum concurrent requests to this model.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Minimum spacing between request starts, milliseconds.
    #[serde(default)]
    pub min_interval_ms: u64,
}

impl Default for RateLimit {
    fn default() -> Self {
        RateLimit {
            max_in_flight: default_max_in_flight(),
            min_interval_ms: 0,
        }
    }
}

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts including the first (so 5 means up to 4 retries).
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// First backoff delay; doubles per subsequent retry.
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_base_ms(),
        }
    }
}

fn default_max_attempts() -> u32 {
    5
}

fn default_backoff_base_ms() -> u64 {
    2000
}

/// Everything needed to talk to one model. Sampling parameters are
/// deliberately absent: requests go out with vendor defaults so audited
/// behavior matches what ordinary API users see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Short unique key used in records and reports (e.g. `gpt-5`).
    pub model_key: String,
    pub endpoint_profile: EndpointProfile,
    /// Vendor model identifier sent on the wire.
    pub model_name: String,
    /// Name of the environment variable holding the API key. Credentials
    /// never appear in config files or stored records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials_env: Option<String>,
    /// Override the endpoint base URL (self-hosted gateways, compatible
    /// vendors, test servers).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default)]
    pub rate_limit: RateLimit,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl ModelSpec {
    /// A mock-profile spec with default limits; tests and fixtures.
    pub fn mock(model_key: impl Into<String>) -> Self {
        let model_key = model_key.into();
        ModelSpec {
            model_name: model_key.clone(),
            model_key,
            endpoint_profile: EndpointProfile::Mock,
            credentials_env: None,
            base_url: None,
            rate_limit: RateLimit::default(),
            retry: RetryPolicy::default(),
        }
    }

    /// Digest of the resolved spec; run manifests record one per model so
    /// a resumed run can detect roster drift.
    pub fn digest(&self) -> Result<String> {
        canonical_digest(self)
    }
}

/// One persisted request/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub model_key: String,
    pub request_turns: Vec<ChatTurn>,
    /// Response text exactly as produced by the vendor; never trimmed,
    /// reflowed, or otherwise altered.
    pub response: String,
    pub request_hash: String,
    pub timestamp: String,
    /// Attempts consumed (1 = succeeded first try).
    pub attempt_count: u32,
    /// Vendor-echoed settings (model snapshot, usage, stop reason) when the
    /// API reports them; purely informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vendor_meta: Option<Value>,
}

impl StoreRecord for ChatExchange {
    const KIND: RecordKind = RecordKind::Exchange;

    fn dedupe_key(&self) -> String {
        self.request_hash.clone()
    }
}

/// Cache key for a request: model, full turn list, and the version of the
/// template that produced it. Editing a template changes the hash, so stale
/// cached replies can never be mistaken for answers to the new wording.
pub fn request_hash(model_key: &str, turns: &[ChatTurn], template_version: &str) -> String {
    let mut fields: Vec<&str> = vec![model_key, template_version];
    for turn in turns {
        fields.push(turn.role.name());
        fields.push(&turn.content);
    }
    hex_sha256_fields(fields)
}

/// Anything that can answer a chat request.
#[async_trait]
pub trait ChatProvider: Send + Sync {
    /// Send `turns` to the model described by `spec` and return the
    /// persisted exchange. `template_version` scopes the cache key.
    async fn complete(
        &self,
        spec: &ModelSpec,
        turns: &[ChatTurn],
        template_version: &str,
    ) -> Result<ChatExchange>;
}

// ---- router ---------------------------------------------------------------

/// The production [`ChatProvider`]: store-backed replay cache in front of
/// per-model rate limiting in front of the HTTP dialects and the mock.
pub struct ProviderRouter {
    store: Arc<RunStore>,
    http: HttpDispatcher,
    mock: Option<Arc<MockProvider>>,
    limiters: Mutex<HashMap<String, Arc<ModelLimiter>>>,
    dispatches: AtomicU64,
    cache_hits: AtomicU64,
}

impl ProviderRouter {
    pub fn new(store: Arc<RunStore>, mock: Option<Arc<MockProvider>>) -> Result<Self> {
        Ok(ProviderRouter {
            store,
            http: HttpDispatcher::new()?,
            mock,
            limiters: Mutex::new(HashMap::new()),
            dispatches: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        })
    }

    /// Requests actually sent to a provider (mock or HTTP); replayed
    /// requests answered from the store are not dispatches.
    pub fn dispatches(&self) -> u64 {
        self.dispatches.load(Ordering::Relaxed)
    }

    /// Requests answered from the store without provider contact.
    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn mock(&self) -> Option<&Arc<MockProvider>> {
        self.mock.as_ref()
    }

    fn limiter_for(&self, spec: &ModelSpec) -> Arc<ModelLimiter> {
        let mut limiters = self.limiters.lock().expect("limiter lock poisoned");
        limiters
            .entry(spec.model_key.clone())
            .or_insert_with(|| Arc::new(ModelLimiter::new(&spec.rate_limit)))
            .clone()
    }

    fn cached_exchange(&self, hash: &str) -> Result<Option<ChatExchange>> {
        match self.store.cached_payload(RecordKind::Exchange, hash) {
            Some(payload) => Ok(Some(serde_json::from_value(payload)?)),
            None => Ok(None),
        }
    }
}

#[async_trait]
impl ChatProvider for ProviderRouter {
    async fn complete(
        &self,
        spec: &ModelSpec,
        turns: &[ChatTurn],
        template_version: &str,
    ) -> Result<ChatExchange> {
        if turns.is_empty() {
            return Err(Error::EmptyInput {
                detail: format!("request to `{}` has no turns", spec.model_key),
            });
        }
        for (index, turn) in turns.iter().enumerate() {
            if turn.content.trim().is_empty() {
                return Err(Error::EmptyTurnContent {
                    model_key: spec.model_key.clone(),
                    index,
                });
            }
        }

        let hash = request_hash(&spec.model_key, turns, template_version);
        if let Some(exchange) = self.cached_exchange(&hash)? {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(exchange);
        }

        let _permit = self.limiter_for(spec).admit().await;
        // A racing identical request may have landed while we waited.
        if let Some(exchange) = self.cached_exchange(&hash)? {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(exchange);
        }

        self.dispatches.fetch_add(1, Ordering::Relaxed);
        let (response, attempt_count, vendor_meta) = match spec.endpoint_profile {
            EndpointProfile::Mock => {
                let mock = self.mock.as_ref().ok_or_else(|| Error::Config {
                    detail: format!(
                        "model `{}` uses the mock profile but no mock script is loaded",
                        spec.model_key
                    ),
                })?;
                let response = mock.complete(spec, turns, &hash).await?;
                (response, 1, None)
            }
            _ => self.http.complete_with_retry(spec, turns).await?,
        };

        let exchange = ChatExchange {
            model_key: spec.model_key.clone(),
            request_turns: turns.to_vec(),
            response,
            request_hash: hash.clone(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            attempt_count,
            vendor_meta,
        };
        let outcome = self.store.append(&exchange)?;
        if !outcome.fresh {
            // Lost a race against an identical concurrent request: the
            // store kept the first write, so hand back that one.
            if let Some(stored) = self.cached_exchange(&hash)? {
                return Ok(stored);
            }
        }
        Ok(exchange)
    }
}
