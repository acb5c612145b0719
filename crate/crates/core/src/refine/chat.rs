//! Chat-completion clients, the audit log and request pacing.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the API key of the live client.
pub const API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_CHAT_ENDPOINT: &str = "https://api.openai.com/v1";

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("chat transport failed: {0}")]
    Transport(String),
    #[error("chat endpoint answered HTTP {0}")]
    Status(u16),
    #[error("malformed chat response: {0}")]
    Protocol(String),
    #[error("no recorded answer for prompt {prompt_hash} (model {model}, attempt {attempt})")]
    NotRecorded { model: String, prompt_hash: String, attempt: u32 },
    #[error("{0}")]
    Io(String),
}

impl ChatError {
    /// Whether retrying the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ChatError::Transport(_) => true,
            ChatError::Status(code) => *code == 408 || *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

/// A single-user-message completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub prompt: String,
    pub prompt_hash: String,
    /// 0 for the first ask, 1 for the retry after an unparseable answer.
    pub attempt: u32,
}

pub trait ChatClient: Send + Sync {
    /// Returns the message content, trimmed.
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        (**self).complete(request)
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatClient {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(120))).build().into();
        Self { endpoint: endpoint.into().trim_end_matches('/').to_owned(), api_key, agent }
    }

    /// Uses the key from [`API_KEY_ENV`], if set.
    pub fn from_env(endpoint: impl Into<String>) -> Self {
        Self::new(endpoint, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        let body = CompletionBody {
            model: &request.model,
            messages: [Message { role: "user", content: &request.prompt }],
            temperature: request.temperature,
        };
        let mut req = self.agent.post(&format!("{}/chat/completions", self.endpoint));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => ChatError::Status(code),
            other => ChatError::Transport(other.to_string()),
        })?;
        let parsed: CompletionResponse = resp.body_mut().read_json().map_err(|e| ChatError::Protocol(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ChatError::Protocol("no message content".into()))?;
        Ok(content.trim().to_owned())
    }
}

/// One logged chat call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    /// Full OSM path of the tag.
    pub tag: String,
    pub strategy: String,
    pub k: usize,
    pub model: String,
    pub prompt_hash: String,
    #[serde(default)]
    pub attempt: u32,
    pub raw_answer: String,
    pub resolved_path: Option<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

type ReplayKey = (String, String, u32);

/// Append-only JSONL log of chat calls; also the response cache for reruns.
#[derive(Debug, Default)]
pub struct AuditLog {
    answers: Mutex<HashMap<ReplayKey, String>>,
    writer: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a log for appending, loading any records already present.
    pub fn open(path: &Path) -> Result<Self, ChatError> {
        let answers = if path.exists() { read_records(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ChatError::Io(format!("{}: {e}", path.display())))?;
        let log = Self {
            answers: Mutex::new(HashMap::new()),
            writer: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_owned()),
        };
        log.remember(&answers);
        Ok(log)
    }

    fn remember(&self, records: &[AuditRecord]) {
        let mut map = self.answers.lock().expect("audit map poisoned");
        for r in records {
            map.insert((r.model.clone(), r.prompt_hash.clone(), r.attempt), r.raw_answer.clone());
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.answers.lock().expect("audit map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A previously recorded answer for this exact request.
    pub fn lookup(&self, request: &ChatRequest) -> Option<String> {
        self.answers
            .lock()
            .expect("audit map poisoned")
            .get(&(request.model.clone(), request.prompt_hash.clone(), request.attempt))
            .cloned()
    }

    pub fn append(&self, record: AuditRecord) -> Result<(), ChatError> {
        if let Some(w) = &self.writer {
            let mut w = w.lock().expect("audit writer poisoned");
            let line = serde_json::to_string(&record).expect("audit records serialize");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| ChatError::Io(e.to_string()))?;
        }
        self.remember(std::slice::from_ref(&record));
        Ok(())
    }
}

/// Reads every record of an audit log.
pub fn read_records(path: &Path) -> Result<Vec<AuditRecord>, ChatError> {
    let file = File::open(path).map_err(|e| ChatError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ChatError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| ChatError::Io(format!("{}:{}: bad audit record: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Answers only from recorded audit logs; used for deterministic reruns.
#[derive(Debug, Default)]
pub struct ReplayChatClient {
    answers: HashMap<ReplayKey, String>,
}

impl ReplayChatClient {
    pub fn from_records(records: impl IntoIterator<Item = AuditRecord>) -> Self {
        let answers = records.into_iter().map(|r| ((r.model, r.prompt_hash, r.attempt), r.raw_answer)).collect();
        Self { answers }
    }

    pub fn open(paths: &[&Path]) -> Result<Self, ChatError> {
        let mut records = Vec::new();
        for p in paths {
            records.extend(read_records(p)?);
        }
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl ChatClient for ReplayChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        self.answers.get(&(request.model.clone(), request.prompt_hash.clone(), request.attempt)).cloned().ok_or_else(
            || ChatError::NotRecorded {
                model: request.model.clone(),
                prompt_hash: request.prompt_hash.clone(),
                attempt: request.attempt,
            },
        )
    }
}

/// Token bucket shared by all request workers.
#[derive(Debug)]
pub struct TokenBucket {
    rate_per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    /// `per_minute` requests on average with bursts of up to `burst`.
    pub fn new(per_minute: f64, burst: usize) -> Self {
        let capacity = burst.max(1) as f64;
        Self { rate_per_sec: per_minute / 60.0, capacity, state: Mutex::new((capacity, Instant::now())) }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("bucket poisoned");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rate_per_sec;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.rate_per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait.min(60.0)));
        }
    }
}
