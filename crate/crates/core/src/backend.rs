//! Chat-completion execution.
//!
//! A [`Backend`] answers one request at a time through a content-addressed
//! cache. Replay backends answer only from the cache directory (the fixture
//! set) and fail with `fixture-miss` otherwise. Live backends fall through to
//! a [`Transport`], retry transient failures with exponential backoff and
//! write every fresh answer to the cache before returning it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompting::{ConversationPlan, Message, Role, StageName};
use crate::schema::Sampling;

pub const DEFAULT_API_KEY_ENV: &str = "GNO_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendProfile {
    pub kind: BackendKind,
    /// OpenAI-compatible root, e.g. `https://api.openai.com/v1`.
    pub base_url: Option<String>,
    pub model: String,
    pub system_enabled: bool,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Requests per minute, shared by all workers.
    pub rate_limit: Option<u32>,
    pub api_key_env: String,
    /// Replay: fixture directory. Live: response cache directory.
    pub cache_dir: Option<PathBuf>,
    /// First retry delay; doubles on each attempt.
    pub backoff_base_ms: u64,
}

impl Default for BackendProfile {
    fn default() -> Self {
        BackendProfile {
            kind: BackendKind::Replay,
            base_url: None,
            model: "gpt-3.5-turbo-0613".into(),
            system_enabled: true,
            max_retries: 5,
            timeout_secs: 120,
            rate_limit: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            cache_dir: None,
            backoff_base_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub params: Sampling,
    pub messages: Vec<Message>,
}

impl ChatRequest {
    /// SHA-256 over the canonical JSON encoding of the request.
    pub fn digest(&self) -> CacheKey {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        CacheKey(hex::encode(Sha256::digest(&bytes)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Where a request comes from; not part of the cache key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLabel {
    pub doc_id: String,
    pub target: String,
    pub stage: StageName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub model: String,
    pub params: Sampling,
    pub messages: Vec<Message>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl CacheEntry {
    pub fn request(&self) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            params: self.params,
            messages: self.messages.clone(),
        }
    }
}

/// Directory of `{digest}.json` files.
#[derive(Debug, Clone)]
pub struct CacheStore {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl CacheStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CacheStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.0))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(raw) => Ok(Some(serde_json::from_str(&raw).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Write-temp-then-rename so concurrent readers never see partial files.
    pub fn put(&self, key: &CacheKey, entry: &CacheEntry) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            key.0,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut body = serde_json::to_string_pretty(entry)?;
        body.push('\n');
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        }
        let dest = self.path_for(key);
        fs::rename(&tmp, &dest).map_err(|e| Error::io(dest, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: rate limits, server errors, timeouts, connection loss.
    Transient(String),
    Permanent(String),
    Malformed(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest, label: &RequestLabel) -> Result<String, TransportError>;
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

/// OpenAI chat-completions over HTTP.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: String, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
        }
    }
}

/// Pull `choices[0].message.content` out of a completion response body.
pub fn parse_completion(body: &str) -> Result<String, TransportError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| TransportError::Malformed(format!("invalid JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| TransportError::Malformed("missing choices[0].message.content".into()))
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest, _label: &RequestLabel) -> Result<String, TransportError> {
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
        };
        let response = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body);
        let mut response = match response {
            Ok(r) => r,
            Err(e) => return Err(TransportError::Transient(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(format!("reading body: {e}")))?;
        match status {
            200..=299 => parse_completion(&text),
            429 | 500..=599 => Err(TransportError::Transient(format!("HTTP {status}"))),
            _ => {
                let snippet: String = text.chars().take(200).collect();
                Err(TransportError::Permanent(format!("HTTP {status}: {snippet}")))
            }
        }
    }
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(per_minute: u32) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(60.0 / per_minute.max(1) as f64),
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let mut next = self.next.lock().expect("rate limiter poisoned");
        let now = Instant::now();
        if let Some(at) = *next {
            if at > now {
                thread::sleep(at - now);
            }
        }
        *next = Some(Instant::now().max(next.unwrap_or(now)) + self.interval);
    }
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicUsize,
    network: AtomicUsize,
    cache_hits: AtomicUsize,
    conversations: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    /// Calls to [`Backend::complete`].
    pub requests: usize,
    /// Transport attempts, including retries.
    pub network_requests: usize,
    pub cache_hits: usize,
    /// Calls to [`Backend::run_plan`].
    pub conversations: usize,
}

pub struct Backend {
    profile: BackendProfile,
    transport: Option<Box<dyn Transport>>,
    store: Option<CacheStore>,
    limiter: Option<RateLimiter>,
    counters: Counters,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("profile", &self.profile)
            .field("live", &self.transport.is_some())
            .finish()
    }
}

impl Backend {
    pub fn from_profile(profile: BackendProfile) -> Result<Self> {
        match profile.kind {
            BackendKind::Replay => {
                let dir = profile
                    .cache_dir
                    .clone()
                    .ok_or_else(|| Error::Config("replay backend needs a fixture directory".into()))?;
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "fixture directory {} does not exist",
                        dir.display()
                    )));
                }
                Ok(Backend {
                    store: Some(CacheStore::new(dir)),
                    transport: None,
                    limiter: None,
                    counters: Counters::default(),
                    profile,
                })
            }
            BackendKind::Http => {
                let base_url = profile
                    .base_url
                    .clone()
                    .ok_or_else(|| Error::Config("http backend needs a base_url".into()))?;
                let key = std::env::var(&profile.api_key_env)
                    .ok()
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| Error::MissingApiKey(profile.api_key_env.clone()))?;
                let transport = HttpTransport::new(&base_url, key, Duration::from_secs(profile.timeout_secs));
                let cache = profile.cache_dir.clone();
                Ok(Self::with_transport(profile, Box::new(transport), cache))
            }
        }
    }

    /// Live backend over any transport.
    pub fn with_transport(
        profile: BackendProfile,
        transport: Box<dyn Transport>,
        cache_dir: Option<PathBuf>,
    ) -> Self {
        Backend {
            limiter: profile.rate_limit.map(RateLimiter::new),
            store: cache_dir.map(CacheStore::new),
            transport: Some(transport),
            counters: Counters::default(),
            profile,
        }
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    pub fn counters(&self) -> CounterSnapshot {
        CounterSnapshot {
            requests: self.counters.requests.load(Ordering::SeqCst),
            network_requests: self.counters.network.load(Ordering::SeqCst),
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            conversations: self.counters.conversations.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, messages: &[Message], sampling: Sampling, label: &RequestLabel) -> Result<Message> {
        if messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(Error::Precondition("messages must end with a user turn".into()));
        }
        self.counters.requests.fetch_add(1, Ordering::SeqCst);
        let request = ChatRequest {
            model: self.profile.model.clone(),
            params: sampling,
            messages: messages.to_vec(),
        };
        let key = request.digest();
        if let Some(store) = &self.store {
            if let Some(hit) = store.get(&key)? {
                self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(Message::assistant(hit.response));
            }
        }
        let Some(transport) = &self.transport else {
            return Err(Error::FixtureMiss { digest: key.0 });
        };
        let response = self.send_with_retries(transport.as_ref(), &request, label)?;
        if let Some(store) = &self.store {
            let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
            store.put(
                &key,
                &CacheEntry {
                    model: request.model,
                    params: request.params,
                    messages: request.messages,
                    response: response.clone(),
                    timestamp,
                },
            )?;
        }
        Ok(Message::assistant(response))
    }

    fn send_with_retries(
        &self,
        transport: &dyn Transport,
        request: &ChatRequest,
        label: &RequestLabel,
    ) -> Result<String> {
        let mut attempt: u32 = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            self.counters.network.fetch_add(1, Ordering::SeqCst);
            attempt += 1;
            match transport.send(request, label) {
                Ok(text) => return Ok(text),
                Err(TransportError::Malformed(m)) => return Err(Error::MalformedResponse(m)),
                Err(TransportError::Permanent(m)) => return Err(Error::Backend { attempts: attempt, message: m }),
                Err(TransportError::Transient(m)) => {
                    if attempt > self.profile.max_retries {
                        return Err(Error::Backend { attempts: attempt, message: m });
                    }
                    let base = self.profile.backoff_base_ms as f64;
                    let delay = base * 2f64.powi(attempt as i32 - 1) + rand::rng().random_range(0.0..=base);
                    log::warn!(
                        "{}::{}::{} attempt {attempt} failed ({m}); retrying in {:.0} ms",
                        label.doc_id,
                        label.target,
                        label.stage,
                        delay
                    );
                    thread::sleep(Duration::from_millis(delay as u64));
                }
            }
        }
    }

    /// Execute a plan stage by stage; each reply joins the history of the
    /// next request. The first failure stops the conversation.
    pub fn run_plan(&self, plan: &ConversationPlan, sampling: Sampling) -> Transcript {
        self.counters.conversations.fetch_add(1, Ordering::SeqCst);
        let mut messages: Vec<Message> = plan.system.iter().cloned().collect();
        let mut stages = Vec::with_capacity(plan.stages.len());
        let mut failed = false;
        for stage in &plan.stages {
            if failed {
                stages.push(StageRecord {
                    stage: stage.name,
                    status: StageStatus::NotAttempted,
                });
                continue;
            }
            let mut request = messages.clone();
            request.push(stage.message.clone());
            let label = RequestLabel {
                doc_id: plan.doc_id.clone(),
                target: plan.target.clone(),
                stage: stage.name,
            };
            match self.complete(&request, sampling, &label) {
                Ok(reply) => {
                    messages = request;
                    messages.push(reply);
                    stages.push(StageRecord {
                        stage: stage.name,
                        status: StageStatus::Ok,
                    });
                }
                Err(e) => {
                    failed = true;
                    stages.push(StageRecord {
                        stage: stage.name,
                        status: StageStatus::Failed { reason: e.to_string() },
                    });
                }
            }
        }
        Transcript {
            id: transcript_id(&plan.doc_id, &plan.target),
            doc_id: plan.doc_id.clone(),
            target: plan.target.clone(),
            messages,
            stages,
        }
    }
}

pub fn transcript_id(doc_id: &str, target: &str) -> String {
    format!("{doc_id}::{target}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed { reason: String },
    NotAttempted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageName,
    #[serde(flatten)]
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub doc_id: String,
    pub target: String,
    pub messages: Vec<Message>,
    pub stages: Vec<StageRecord>,
}

impl Transcript {
    pub fn is_complete(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Ok)
    }

    pub fn failure(&self) -> Option<String> {
        self.stages.iter().find_map(|s| match &s.status {
            StageStatus::Failed { reason } => Some(format!("{} stage failed: {reason}", s.stage)),
            _ => None,
        })
    }

    /// Assistant replies in order.
    pub fn replies(&self) -> impl Iterator<Item = &str> {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
    }

    /// The last reply, when every stage succeeded.
    pub fn final_reply(&self) -> Option<&str> {
        if self.is_complete() {
            self.replies().last()
        } else {
            None
        }
    }
}

pub fn write_transcripts(path: &Path, transcripts: &[Transcript]) -> Result<()> {
    let mut out = String::new();
    for t in transcripts {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
