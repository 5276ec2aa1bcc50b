//! Model backends and batched prompt dispatch.
//!
//! [`dispatch`] sends a batch of prompts to one model with a bounded number of
//! requests in flight, retries transient failures with exponential backoff and
//! consults a [`ResponseCache`] before touching the backend. Output is sorted
//! by `(vignette_id, variant_id)` whatever order requests complete in.

pub mod cache;
pub mod http;
pub mod mock;

use std::collections::{BTreeSet, HashSet};
use std::io;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::catalog::compare_vignette_ids;
use crate::prompting::ChatTemplateKind;

pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use http::HttpBackend;
pub use mock::{mock_complete, MockProfile, Verbosity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizationTag {
    Dpo,
    Awq,
    Rlhf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_max_tokens() -> u32 {
    128
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Http {
        base_url: String,
        model_id: String,
        /// Name of the environment variable holding the bearer token.
        api_key_env: String,
    },
    Mock {
        profile: MockProfile,
    },
}

/// Identity and querying parameters of one model under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub capacity_label: String,
    #[serde(default)]
    pub optimization_tags: BTreeSet<OptimizationTag>,
    pub chat_template_kind: ChatTemplateKind,
    pub backend: BackendSpec,
    #[serde(default)]
    pub sampling: SamplingParams,
    /// Prompt variants to query; `None` means all loaded variants.
    #[serde(default)]
    pub variant_ids: Option<Vec<u32>>,
}

/// One answered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub vignette_id: String,
    pub variant_id: u32,
    pub model_name: String,
    pub raw_text: String,
    pub attempts: u32,
    pub from_cache: bool,
    pub timestamp: String,
}

/// A prompt ready to send, keyed by vignette and variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptItem {
    pub vignette_id: String,
    pub variant_id: u32,
    pub wire_text: String,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub vignette_id: &'a str,
    pub variant_id: u32,
    pub wire_text: &'a str,
}

/// Outcome of a single backend attempt.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttemptError {
    /// Timeouts, connection failures, HTTP 429 and 5xx.
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, AttemptError>;
}

pub struct MockBackend {
    profile: MockProfile,
}

impl MockBackend {
    pub fn new(profile: MockProfile) -> Result<Self, mock::MockProfileError> {
        profile.validate()?;
        Ok(Self { profile })
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, AttemptError> {
        Ok(mock_complete(
            request.wire_text,
            request.vignette_id,
            &self.profile,
        ))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DispatchError {
    #[error("backend unreachable for {vignette_id}/{variant_id} after {attempts} attempts: {last_error}")]
    BackendUnreachable {
        vignette_id: String,
        variant_id: u32,
        attempts: u32,
        last_error: String,
    },
    #[error("authentication failed (HTTP {status})")]
    AuthFailure { status: u16 },
    #[error("malformed reply for {vignette_id}/{variant_id}: {message}")]
    MalformedReply {
        vignette_id: String,
        variant_id: u32,
        message: String,
    },
    #[error("backend rejected {vignette_id}/{variant_id} with HTTP {status}: {body}")]
    Rejected {
        vignette_id: String,
        variant_id: u32,
        status: u16,
        body: String,
    },
    #[error("prompt key {vignette_id}/{variant_id} appears more than once")]
    DuplicatePrompt { vignette_id: String, variant_id: u32 },
    #[error("environment variable {0} with the API key is not set")]
    MissingApiKey(String),
    #[error("invalid mock profile: {0}")]
    BadProfile(#[from] mock::MockProfileError),
    #[error("failed to build HTTP client: {0}")]
    Client(#[from] reqwest::Error),
    #[error("response cache I/O failed: {0}")]
    Cache(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_in_flight: usize,
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
    pub request_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            max_retries: 3,
            backoff: Duration::from_secs(1),
            request_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DispatchOutcome {
    pub responses: Vec<RawResponse>,
    /// Backend attempts made, retries included.
    pub backend_calls: usize,
    pub cache_hits: usize,
}

/// Build the backend a spec describes. HTTP backends read their key from the
/// environment here, so a missing key fails before any request.
pub fn backend_for(spec: &ModelSpec, opts: &RunOptions) -> Result<Arc<dyn Backend>, DispatchError> {
    match &spec.backend {
        BackendSpec::Mock { profile } => Ok(Arc::new(MockBackend::new(profile.clone())?)),
        BackendSpec::Http {
            base_url,
            model_id,
            api_key_env,
        } => {
            let key = std::env::var(api_key_env)
                .map_err(|_| DispatchError::MissingApiKey(api_key_env.clone()))?;
            Ok(Arc::new(HttpBackend::new(
                base_url,
                model_id,
                key,
                spec.sampling.clone(),
                opts.request_timeout,
            )?))
        }
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

async fn call_with_retries(
    backend: &dyn Backend,
    item: &PromptItem,
    opts: &RunOptions,
    calls: &AtomicUsize,
) -> Result<(String, u32), DispatchError> {
    let request = CompletionRequest {
        vignette_id: &item.vignette_id,
        variant_id: item.variant_id,
        wire_text: &item.wire_text,
    };
    let mut attempts = 0u32;
    let mut delay = opts.backoff;
    loop {
        attempts += 1;
        calls.fetch_add(1, Ordering::Relaxed);
        match backend.complete(&request).await {
            Ok(text) => return Ok((text, attempts)),
            Err(AttemptError::Transient(msg)) => {
                if attempts > opts.max_retries {
                    return Err(DispatchError::BackendUnreachable {
                        vignette_id: item.vignette_id.clone(),
                        variant_id: item.variant_id,
                        attempts,
                        last_error: msg,
                    });
                }
                tracing::debug!(vignette = %item.vignette_id, variant = item.variant_id, attempts, %msg, "retrying");
                tokio::time::sleep(delay).await;
                delay = delay.saturating_mul(2);
            }
            Err(AttemptError::Auth(status)) => return Err(DispatchError::AuthFailure { status }),
            Err(AttemptError::Malformed(message)) => {
                return Err(DispatchError::MalformedReply {
                    vignette_id: item.vignette_id.clone(),
                    variant_id: item.variant_id,
                    message,
                })
            }
            Err(AttemptError::Rejected { status, body }) => {
                return Err(DispatchError::Rejected {
                    vignette_id: item.vignette_id.clone(),
                    variant_id: item.variant_id,
                    status,
                    body,
                })
            }
        }
    }
}

/// Send every prompt to `backend`, serving cache hits locally.
pub async fn dispatch(
    prompts: &[PromptItem],
    spec: &ModelSpec,
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    opts: &RunOptions,
) -> Result<DispatchOutcome, DispatchError> {
    let mut seen = HashSet::with_capacity(prompts.len());
    for p in prompts {
        if !seen.insert((p.vignette_id.as_str(), p.variant_id)) {
            return Err(DispatchError::DuplicatePrompt {
                vignette_id: p.vignette_id.clone(),
                variant_id: p.variant_id,
            });
        }
    }

    let calls = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);
    let calls_ref = &calls;
    let hits_ref = &hits;
    let mut responses: Vec<RawResponse> = futures::stream::iter(prompts.iter())
        .map(|item| async move {
            let key = cache_key(spec, &item.wire_text);
            if let Some(entry) = cache.and_then(|c| c.get(&key)) {
                hits_ref.fetch_add(1, Ordering::Relaxed);
                return Ok(RawResponse {
                    vignette_id: item.vignette_id.clone(),
                    variant_id: item.variant_id,
                    model_name: spec.name.clone(),
                    raw_text: entry.raw_text,
                    attempts: entry.attempts.max(1),
                    from_cache: true,
                    timestamp: entry.ts,
                });
            }
            let (raw_text, attempts) = call_with_retries(backend, item, opts, calls_ref).await?;
            let timestamp = now_rfc3339();
            if let Some(cache) = cache {
                cache.insert(CacheEntry {
                    key,
                    model: spec.name.clone(),
                    vignette_id: item.vignette_id.clone(),
                    variant_id: item.variant_id,
                    raw_text: raw_text.clone(),
                    ts: timestamp.clone(),
                    attempts,
                })?;
            }
            Ok::<_, DispatchError>(RawResponse {
                vignette_id: item.vignette_id.clone(),
                variant_id: item.variant_id,
                model_name: spec.name.clone(),
                raw_text,
                attempts,
                from_cache: false,
                timestamp,
            })
        })
        .buffer_unordered(opts.max_in_flight.max(1))
        .try_collect()
        .await?;

    responses.sort_by(|a, b| {
        compare_vignette_ids(&a.vignette_id, &b.vignette_id).then(a.variant_id.cmp(&b.variant_id))
    });
    Ok(DispatchOutcome {
        responses,
        backend_calls: calls.load(Ordering::Relaxed),
        cache_hits: hits.load(Ordering::Relaxed),
    })
}

pub fn write_raw_responses<W: io::Write>(responses: &[RawResponse], mut out: W) -> io::Result<()> {
    for r in responses {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_raw_responses<R: io::BufRead>(input: R) -> io::Result<Vec<RawResponse>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
