//! HTTP dialects for live vendors.
//!
//! Three wire shapes cover the current API landscape: bearer-token chat
//! completions (OpenAI and compatible vendors), versioned messages with a
//! separate system field (Anthropic), and `generateContent` (Google). The
//! builders and parsers are pure functions over JSON so they can be tested
//! without a network; the retry loop around them classifies failures into
//! retryable (429, 5xx, timeouts, connection errors — retried with
//! exponential backoff) and fatal (auth rejections and other 4xx — never
//! retried, so a bad key fails in one attempt instead of hammering the
//! vendor).

use std::time::Duration;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

use super::{ChatTurn, EndpointProfile, ModelSpec, Role};

const REQUEST_TIMEOUT: Duration = Duration::from_secs(120);
/// Anthropic's messages endpoint requires an explicit completion budget;
/// other dialects are left at vendor defaults.
const ANTHROPIC_MAX_TOKENS: u64 = 4096;
const ANTHROPIC_VERSION: &str = "2023-06-01";

pub struct HttpDispatcher {
    client: reqwest::Client,
}

/// How one attempt failed.
enum AttemptError {
    /// Worth retrying: rate limit, server error, timeout, connection loss.
    Retryable(String),
    /// Never retried: auth failures, invalid requests, unparseable bodies.
    Fatal(Error),
}

impl HttpDispatcher {
    pub fn new() -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(REQUEST_TIMEOUT)
            .build()?;
        Ok(HttpDispatcher { client })
    }

    /// Run the request under the model's retry policy. Returns the verbatim
    /// response text, the number of attempts consumed, and any echoed
    /// vendor metadata.
    pub async fn complete_with_retry(
        &self,
        spec: &ModelSpec,
        turns: &[ChatTurn],
    ) -> Result<(String, u32, Option<Value>)> {
        let credential = resolve_credential(spec)?;
        let max_attempts = spec.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(spec, turns, &credential).await {
                Ok((text, meta)) => return Ok((text, attempt, meta)),
                Err(AttemptError::Fatal(err)) => return Err(err),
                Err(AttemptError::Retryable(detail)) => {
                    if attempt >= max_attempts {
                        return Err(Error::RetriesExhausted {
                            model_key: spec.model_key.clone(),
                            attempts: attempt,
                            last_error: detail,
                        });
                    }
                    let delay = backoff_delay(spec.retry.backoff_base_ms, attempt);
                    log::warn!(
                        "attempt {attempt}/{max_attempts} to `{}` failed ({detail}); retrying in {:.1}s",
                        spec.model_key,
                        delay.as_secs_f64()
                    );
                    tokio::time::sleep(delay).await;
                }
            }
        }
    }

    async fn attempt(
        &self,
        spec: &ModelSpec,
        turns: &[ChatTurn],
        credential: &str,
    ) -> std::result::Result<(String, Option<Value>), AttemptError> {
        let wire = build_request(spec, turns).map_err(AttemptError::Fatal)?;
        let mut request = self.client.post(&wire.url).json(&wire.body);
        for (name, value) in wire_headers(spec, credential) {
            request = request.header(name, value);
        }

        let response = request.send().await.map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                AttemptError::Retryable(e.to_string())
            } else {
                AttemptError::Fatal(Error::Http(e))
            }
        })?;

        let status = response.status();
        let body = response
            .text()
            .await
            .map_err(|e| AttemptError::Retryable(format!("reading body: {e}")))?;

        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(AttemptError::Fatal(Error::AuthRejected {
                model_key: spec.model_key.clone(),
                status: status.as_u16(),
            }));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!(
                "HTTP {}: {}",
                status.as_u16(),
                truncate(&body, 200)
            )));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(Error::VendorStatus {
                model_key: spec.model_key.clone(),
                status: status.as_u16(),
                body: truncate(&body, 500),
            }));
        }

        let payload: Value = serde_json::from_str(&body).map_err(|e| {
            AttemptError::Fatal(Error::MalformedVendorPayload {
                model_key: spec.model_key.clone(),
                detail: format!("response is not JSON: {e}"),
            })
        })?;
        parse_response(spec, &payload).map_err(AttemptError::Fatal)
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_string()
    } else {
        let cut: String = s.chars().take(max).collect();
        format!("{cut}…")
    }
}

fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    // base, 2*base, 4*base, ... for attempts 1, 2, 3, ...
    Duration::from_millis(base_ms.saturating_mul(1u64 << (attempt - 1).min(16)))
}

fn resolve_credential(spec: &ModelSpec) -> Result<String> {
    let var = spec
        .credentials_env
        .as_deref()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::MissingCredential {
            var: "(credentials_env unset)".into(),
            model_key: spec.model_key.clone(),
        })?;
    match std::env::var(var) {
        Ok(value) if !value.trim().is_empty() => Ok(value),
        _ => Err(Error::MissingCredential {
            var: var.to_string(),
            model_key: spec.model_key.clone(),
        }),
    }
}

/// A fully built request, minus auth headers.
struct WireRequest {
    url: String,
    body: Value,
}

fn default_base_url(profile: EndpointProfile) -> &'static str {
    match profile {
        EndpointProfile::OpenaiChat => "https://api.openai.com/v1",
        EndpointProfile::AnthropicMessages => "https://api.anthropic.com",
        EndpointProfile::GoogleGenerateContent => "https://generativelanguage.googleapis.com",
        EndpointProfile::Mock => "mock:",
    }
}

fn base_url(spec: &ModelSpec) -> String {
    spec.base_url
        .clone()
        .unwrap_or_else(|| default_base_url(spec.endpoint_profile).to_string())
        .trim_end_matches('/')
        .to_string()
}

fn build_request(spec: &ModelSpec, turns: &[ChatTurn]) -> Result<WireRequest> {
    let base = base_url(spec);
    match spec.endpoint_profile {
        EndpointProfile::OpenaiChat => Ok(WireRequest {
            url: format!("{base}/chat/completions"),
            body: json!({
                "model": spec.model_name,
                "messages": turns
                    .iter()
                    .map(|t| json!({"role": t.role.name(), "content": t.content}))
                    .collect::<Vec<_>>(),
            }),
        }),
        EndpointProfile::AnthropicMessages => {
            let system: Vec<&str> = turns
                .iter()
                .filter(|t| t.role == Role::System)
                .map(|t| t.content.as_str())
                .collect();
            let messages: Vec<Value> = turns
                .iter()
                .filter(|t| t.role != Role::System)
                .map(|t| json!({"role": t.role.name(), "content": t.content}))
                .collect();
            let mut body = json!({
                "model": spec.model_name,
                "max_tokens": ANTHROPIC_MAX_TOKENS,
                "messages": messages,
            });
            if !system.is_empty() {
                body["system"] = Value::String(system.join("\n\n"));
            }
            Ok(WireRequest {
                url: format!("{base}/v1/messages"),
                body,
            })
        }
        EndpointProfile::GoogleGenerateContent => {
            let system: Vec<&str> = turns
                .iter()
                .filter(|t| t.role == Role::System)
                .map(|t| t.content.as_str())
                .collect();
            let contents: Vec<Value> = turns
                .iter()
                .filter(|t| t.role != Role::System)
                .map(|t| {
                    let role = match t.role {
                        Role::Assistant => "model",
                        _ => "user",
                    };
                    json!({"role": role, "parts": [{"text": t.content}]})
                })
                .collect();
            let mut body = json!({ "contents": contents });
            if !system.is_empty() {
                body["systemInstruction"] = json!({"parts": [{"text": system.join("\n\n")}]});
            }
            Ok(WireRequest {
                url: format!(
                    "{base}/v1beta/models/{}:generateContent",
                    spec.model_name
                ),
                body,
            })
        }
        EndpointProfile::Mock => Err(Error::Config {
            detail: format!(
                "model `{}`: the mock profile has no HTTP endpoint",
                spec.model_key
            ),
        }),
    }
}

fn wire_headers(spec: &ModelSpec, credential: &str) -> Vec<(&'static str, String)> {
    match spec.endpoint_profile {
        EndpointProfile::OpenaiChat => {
            vec![("authorization", format!("Bearer {credential}"))]
        }
        EndpointProfile::AnthropicMessages => vec![
            ("x-api-key", credential.to_string()),
            ("anthropic-version", ANTHROPIC_VERSION.to_string()),
        ],
        EndpointProfile::GoogleGenerateContent => {
            vec![("x-goog-api-key", credential.to_string())]
        }
        EndpointProfile::Mock => Vec::new(),
    }
}

/// Pull the assistant text (and echoed metadata) out of a vendor response.
fn parse_response(spec: &ModelSpec, payload: &Value) -> Result<(String, Option<Value>)> {
    let malformed = |detail: &str| Error::MalformedVendorPayload {
        model_key: spec.model_key.clone(),
        detail: detail.to_string(),
    };
    match spec.endpoint_profile {
        EndpointProfile::OpenaiChat => {
            let choice = payload
                .get("choices")
                .and_then(|c| c.get(0))
                .ok_or_else(|| malformed("missing choices[0]"))?;
            let text = choice
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("missing choices[0].message.content"))?;
            let meta = echo_meta(
                payload,
                &[("model", "/model"), ("usage", "/usage")],
                &[("finish_reason", choice.pointer("/finish_reason"))],
            );
            Ok((text.to_string(), meta))
        }
        EndpointProfile::AnthropicMessages => {
            let blocks = payload
                .get("content")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("missing content array"))?;
            let text: String = blocks
                .iter()
                .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
                .filter_map(|b| b.get("text").and_then(Value::as_str))
                .collect();
            if text.is_empty() && !blocks.is_empty() {
                return Err(malformed("content array has no text blocks"));
            }
            let meta = echo_meta(
                payload,
                &[
                    ("model", "/model"),
                    ("usage", "/usage"),
                    ("stop_reason", "/stop_reason"),
                ],
                &[],
            );
            Ok((text, meta))
        }
        EndpointProfile::GoogleGenerateContent => {
            let parts = payload
                .pointer("/candidates/0/content/parts")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("missing candidates[0].content.parts"))?;
            let text: String = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            let meta = echo_meta(
                payload,
                &[
                    ("modelVersion", "/modelVersion"),
                    ("usageMetadata", "/usageMetadata"),
                ],
                &[(
                    "finishReason",
                    payload.pointer("/candidates/0/finishReason"),
                )],
            );
            Ok((text, meta))
        }
        EndpointProfile::Mock => Err(Error::Config {
            detail: "mock responses are not parsed here".into(),
        }),
    }
}

/// Collect whichever echoed settings the vendor reported. Returns `None`
/// when nothing was present.
fn echo_meta(
    payload: &Value,
    pointers: &[(&str, &str)],
    extra: &[(&str, Option<&Value>)],
) -> Option<Value> {
    let mut map = Map::new();
    for (name, pointer) in pointers {
        if let Some(v) = payload.pointer(pointer) {
            if !v.is_null() {
                map.insert(name.to_string(), v.clone());
            }
        }
    }
    for (name, value) in extra {
        if let Some(v) = value {
            if !v.is_null() {
                map.insert(name.to_string(), (*v).clone());
            }
        }
    }
    if map.is_empty() {
        None
    } else {
        Some(Value::Object(map))
    }
}
