//! Text-generation backends.
//!
//! [`Backend`] is the contract every model endpoint implements. Wrappers add
//! retries ([`Retrying`]) and a content-addressed disk cache
//! ([`CachedBackend`]). [`ScriptedBackend`] answers from a fixed script and
//! records every request, which is what the test suites run against.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::Paradigm;
use crate::retrieval::{sanitize, write_atomic};
use crate::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request timed out")]
    Timeout,
    #[error("remote error (status {status}): {message}")]
    Remote { status: u16, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries {
        attempts: u32,
        last: Box<BackendError>,
    },
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("no script entry matches prompt starting {excerpt:?}")]
    UnmatchedPrompt { excerpt: String },
    #[error("script entries {rules:?} all match the same prompt")]
    AmbiguousPrompt { rules: Vec<usize> },
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("response cache: {0}")]
    Cache(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Remote { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Sampling settings sent with every request. Defaults are greedy decoding
/// with the usual OpenAI-client values for the remaining knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    /// Retries after the first failed attempt.
    pub max_rounds_retry: u32,
    pub timeout_secs: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            top_k: 50,
            repetition_penalty: 1.0,
            max_rounds_retry: 2,
            timeout_secs: 120,
        }
    }
}

impl GenerationConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidRequest(m.into()));
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        if !(self.repetition_penalty > 0.0) {
            return bad("repetition_penalty must be > 0");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// Which backend id serves each paradigm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelAssignment {
    pub deductive: String,
    pub inductive: String,
    pub abductive: String,
}

impl Default for ModelAssignment {
    fn default() -> Self {
        Self {
            deductive: "phi4".into(),
            inductive: "llama4".into(),
            abductive: "deepseek".into(),
        }
    }
}

impl ModelAssignment {
    pub fn get(&self, paradigm: Paradigm) -> &str {
        match paradigm {
            Paradigm::Deductive => &self.deductive,
            Paradigm::Inductive => &self.inductive,
            Paradigm::Abductive => &self.abductive,
        }
    }

    pub fn set(&mut self, paradigm: Paradigm, backend: impl Into<String>) {
        let slot = match paradigm {
            Paradigm::Deductive => &mut self.deductive,
            Paradigm::Inductive => &mut self.inductive,
            Paradigm::Abductive => &mut self.abductive,
        };
        *slot = backend.into();
    }

    pub fn validate(&self) -> Result<(), String> {
        for p in Paradigm::ALL {
            if self.get(p).trim().is_empty() {
                return Err(format!("no backend assigned to the {p} agent"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub config: GenerationConfig,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, config: GenerationConfig) -> Result<Self, BackendError> {
        let req = Self { messages, config };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.messages.first() {
            None => Err(BackendError::InvalidRequest(
                "request has no messages".into(),
            )),
            Some(m) if m.role != Role::System => Err(BackendError::InvalidRequest(
                "first message must be the system message".into(),
            )),
            Some(_) => self.config.validate(),
        }
    }

    pub fn system_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map_or("", |m| &m.content)
    }

    pub fn last_text(&self) -> &str {
        self.messages.last().map_or("", |m| &m.content)
    }

    /// All message contents joined, for substring matching.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Hash of the message list alone (sampling config excluded).
    pub fn prompt_hash(&self) -> String {
        sha256_hex(crate::jsonl::to_line(&self.messages))
    }

    fn cache_key(&self, backend_id: &str) -> String {
        sha256_hex(format!("{backend_id}\n{}", crate::jsonl::to_line(self)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<T: Backend + ?Sized> Backend for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn generate(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).generate(request)
    }
}

/// Validates the request, calls the backend and rejects blank output.
pub fn generate(
    backend: &dyn Backend,
    request: &ChatRequest,
) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    let resp = backend.generate(request)?;
    if resp.text.trim().is_empty() {
        return Err(BackendError::EmptyResponse);
    }
    Ok(resp)
}

/// Retries retryable failures up to `config.max_rounds_retry` extra times
/// with exponential backoff (`base, 2*base, 4*base, ...`).
pub struct Retrying<B> {
    inner: B,
    base_delay: Duration,
}

impl<B: Backend> Retrying<B> {
    pub fn new(inner: B, base_delay: Duration) -> Self {
        Self { inner, base_delay }
    }
}

impl<B: Backend> Backend for Retrying<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let attempts = request.config.max_rounds_retry + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.base_delay * 2u32.saturating_pow(attempt - 1));
            }
            match self.inner.generate(request) {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_retryable() => {
                    tracing::warn!(backend = self.inner.id(), attempt, error = %e, "generation failed");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::ExhaustedRetries {
            attempts,
            last: Box::new(last.expect("at least one attempt")),
        })
    }
}

/// OpenAI-compatible `/chat/completions` endpoint; one attempt per call.
pub struct HttpBackend {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    top_k: u32,
    repetition_penalty: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    /// `url` is the full chat-completions URL.
    pub fn new(
        id: impl Into<String>,
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        Self {
            id: id.into(),
            url: url.into(),
            model: model.into(),
            api_key,
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(request.config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = WireRequest {
            model: &self.model,
            messages: &request.messages,
            temperature: request.config.temperature,
            top_p: request.config.top_p,
            top_k: request.config.top_k,
            repetition_penalty: request.config.repetition_penalty,
        };
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Remote {
                status,
                message: text.chars().take(500).collect(),
            });
        }
        let wire: WireResponse = serde_json::from_str(&text).map_err(|e| BackendError::Remote {
            status,
            message: format!("malformed response body: {e}"),
        })?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if content.trim().is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        Ok(ChatResponse {
            text: content,
            usage: wire.usage.unwrap_or_default(),
        })
    }
}

/// Content-addressed response cache in front of another backend. Entries are
/// keyed by the hash of (backend id, full request) and only successful
/// responses are stored.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    write_lock: Mutex<()>,
    misses: AtomicUsize,
    hits: AtomicUsize,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            write_lock: Mutex::new(()),
            misses: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    /// Calls forwarded to the wrapped backend.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn path_for(&self, request: &ChatRequest) -> PathBuf {
        let key = request.cache_key(self.inner.id());
        self.dir
            .join("responses")
            .join(sanitize(self.inner.id()))
            .join(&key[..2])
            .join(format!("{key}.json"))
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let path = self.path_for(request);
        if let Ok(text) = fs::read_to_string(&path) {
            match serde_json::from_str(&text) {
                Ok(resp) => {
                    self.hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(resp);
                }
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "ignoring corrupt cache entry")
                }
            }
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let resp = self.inner.generate(request)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        write_atomic(&path, crate::jsonl::to_line(&resp).as_bytes())
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        Ok(resp)
    }
}

/// Request predicate used by [`ScriptedBackend`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Substring of the system message.
    System(String),
    /// Substring of the final message.
    Last(String),
    /// Substring anywhere in the request.
    Contains(String),
    /// Exact [`ChatRequest::prompt_hash`].
    PromptHash(String),
    All(Vec<Matcher>),
    Not(Box<Matcher>),
}

impl Matcher {
    pub fn matches(&self, request: &ChatRequest) -> bool {
        match self {
            Matcher::System(s) => request.system_text().contains(s.as_str()),
            Matcher::Last(s) => request.last_text().contains(s.as_str()),
            Matcher::Contains(s) => request.full_text().contains(s.as_str()),
            Matcher::PromptHash(h) => request.prompt_hash() == *h,
            Matcher::All(ms) => ms.iter().all(|m| m.matches(request)),
            Matcher::Not(m) => !m.matches(request),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptReply {
    Text(String),
    /// Fails the call with a remote error of this status.
    Fail(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub when: Matcher,
    pub reply: ScriptReply,
}

/// Answers each request with the reply of the single matching rule and
/// records every request in arrival order.
pub struct ScriptedBackend {
    id: String,
    rules: Vec<ScriptRule>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, rules: Vec<ScriptRule>) -> Self {
        Self {
            id: id.into(),
            rules,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Convenience for `(matcher, text)` scripts.
    pub fn from_pairs(
        id: impl Into<String>,
        pairs: impl IntoIterator<Item = (Matcher, String)>,
    ) -> Self {
        Self::new(
            id,
            pairs
                .into_iter()
                .map(|(when, text)| ScriptRule {
                    when,
                    reply: ScriptReply::Text(text),
                })
                .collect(),
        )
    }

    /// Loads a script file with one [`ScriptRule`] per line.
    pub fn from_file(id: impl Into<String>, path: &Path) -> Result<Self, crate::jsonl::JsonlError> {
        let rules = crate::jsonl::read_records::<ScriptRule>(path)?
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        Ok(Self::new(id, rules))
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());
        let matching: Vec<usize> = self
            .rules
            .iter()
            .enumerate()
            .filter(|(_, r)| r.when.matches(request))
            .map(|(i, _)| i)
            .collect();
        match matching.as_slice() {
            [] => Err(BackendError::UnmatchedPrompt {
                excerpt: request.last_text().chars().take(120).collect(),
            }),
            [i] => match &self.rules[*i].reply {
                ScriptReply::Text(text) => Ok(ChatResponse {
                    text: text.clone(),
                    usage: Usage::default(),
                }),
                ScriptReply::Fail(status) => Err(BackendError::Remote {
                    status: *status,
                    message: "scripted failure".into(),
                }),
            },
            _ => Err(BackendError::AmbiguousPrompt { rules: matching }),
        }
    }
}

/// Backends addressable by id.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, backend: Arc<dyn Backend>) {
        self.backends.insert(backend.id().to_owned(), backend);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Backend>, BackendError> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| BackendError::UnknownBackend(id.into()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}
