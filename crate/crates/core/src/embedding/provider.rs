//! Embedding providers and the on-disk vector cache.
//!
//! The cache file is JSON lines, one record per `(model, text hash)`:
//!
//! ```text
//! {"model":"all-MiniLM-L6-v2","hash":"9f86d0…","vector":[0.01,-0.2,…]}
//! ```
//!
//! The same format backs [`VectorFileProvider`], so a cache written during a
//! live run can be replayed offline.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbedError, EmbeddingVector};

/// Source of text embeddings for one model.
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;

    /// Whether identical input batches always produce identical vectors.
    fn is_deterministic(&self) -> bool {
        true
    }

    /// Returns one raw (un-normalized) vector per input text, in order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed(texts)
    }
}

/// Hex SHA-256 of the exact text sent to the model.
pub fn text_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    model: String,
    hash: String,
    vector: Vec<f64>,
}

/// Vectors keyed by `(model, text hash)`, optionally backed by an append-only file.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    vectors: HashMap<(String, String), Vec<f64>>,
    file: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file; existing records are loaded and new ones appended.
    pub fn open(path: &Path) -> Result<Self, EmbedError> {
        let mut cache = Self::read(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        cache.file = Some(Mutex::new(BufWriter::new(file)));
        Ok(cache)
    }

    /// Loads a cache file without opening it for writing. A missing file is an error.
    pub fn read(path: &Path) -> Result<Self, EmbedError> {
        let mut vectors = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| io_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| {
                    EmbedError::Protocol(format!("{}:{}: bad cache record: {e}", path.display(), i + 1))
                })?;
                vectors.insert((rec.model, rec.hash), rec.vector);
            }
        } else {
            return Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
        }
        Ok(Self { vectors, file: None, path: Some(path.to_owned()) })
    }

    /// Like [`EmbeddingCache::open`], creating an empty file when none exists.
    pub fn open_or_create(path: &Path) -> Result<Self, EmbedError> {
        if !path.exists() {
            File::create(path).map_err(|e| io_err(path, e))?;
        }
        Self::open(path)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, model: &str, text: &str) -> Option<EmbeddingVector> {
        self.get_hash(model, &text_hash(text))
    }

    fn get_hash(&self, model: &str, hash: &str) -> Option<EmbeddingVector> {
        self.vectors.get(&(model.to_owned(), hash.to_owned())).map(|v| EmbeddingVector::new(v.clone()))
    }

    /// Stores vectors and, for file-backed caches, appends and flushes them.
    pub fn insert_batch(&mut self, model: &str, items: &[(String, EmbeddingVector)]) -> Result<(), EmbedError> {
        if let Some(file) = &self.file {
            let mut w = file.lock().expect("cache writer poisoned");
            for (text, v) in items {
                let rec =
                    CacheRecord { model: model.to_owned(), hash: text_hash(text), vector: v.components().to_vec() };
                let line = serde_json::to_string(&rec).expect("cache records serialize");
                writeln!(w, "{line}").map_err(|e| io_err(self.path.as_deref().unwrap_or(Path::new("?")), e))?;
            }
            w.flush().map_err(|e| io_err(self.path.as_deref().unwrap_or(Path::new("?")), e))?;
        }
        for (text, v) in items {
            self.vectors.insert((model.to_owned(), text_hash(text)), v.components().to_vec());
        }
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> EmbedError {
    EmbedError::Io(format!("{}: {e}", path.display()))
}

/// Serves precomputed vectors from a cache file; unknown texts are an error.
#[derive(Debug)]
pub struct VectorFileProvider {
    model: String,
    cache: EmbeddingCache,
}

impl VectorFileProvider {
    pub fn open(path: &Path, model: impl Into<String>) -> Result<Self, EmbedError> {
        Ok(Self { model: model.into(), cache: EmbeddingCache::read(path)? })
    }

    pub fn from_cache(cache: EmbeddingCache, model: impl Into<String>) -> Self {
        Self { model: model.into(), cache }
    }
}

impl EmbeddingProvider for VectorFileProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .map(|t| self.cache.get(&self.model, t).ok_or_else(|| EmbedError::MissingVector { text: t.clone() }))
            .collect()
    }
}

/// Wraps a provider with a cache so repeated texts never reach it twice.
///
/// Each batch of fresh vectors is written to the cache before `embed`
/// returns, so an interrupted run resumes from the last completed batch.
pub struct CachedProvider<P> {
    inner: P,
    cache: Mutex<EmbeddingCache>,
    calls: AtomicUsize,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    pub fn new(inner: P, cache: EmbeddingCache) -> Self {
        Self { inner, cache: Mutex::new(cache), calls: AtomicUsize::new(0) }
    }

    /// Number of `embed` calls forwarded to the wrapped provider.
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cached_vectors(&self) -> usize {
        self.cache.lock().expect("cache poisoned").len()
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let model = self.inner.model_id().to_owned();
        let mut missing: Vec<String> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache poisoned");
            for t in texts {
                if cache.get(&model, t).is_none() && !missing.contains(t) {
                    missing.push(t.clone());
                }
            }
        }
        if !missing.is_empty() {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let fresh = self.inner.embed(&missing)?;
            if fresh.len() != missing.len() {
                return Err(EmbedError::Protocol(format!(
                    "provider returned {} vectors for {} texts",
                    fresh.len(),
                    missing.len()
                )));
            }
            let items: Vec<(String, EmbeddingVector)> = missing.into_iter().zip(fresh).collect();
            self.cache.lock().expect("cache poisoned").insert_batch(&model, &items)?;
        }
        let cache = self.cache.lock().expect("cache poisoned");
        texts
            .iter()
            .map(|t| cache.get(&model, t).ok_or_else(|| EmbedError::MissingVector { text: t.clone() }))
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    #[allow(dead_code)]
    model: String,
    dimension: usize,
    vectors: Vec<Vec<f64>>,
}

/// Client for the embedding microservice (`POST /embed`, `GET /models`, `GET /health`).
pub struct HttpEmbeddingProvider {
    endpoint: String,
    model: String,
    batch_cap: usize,
    agent: ureq::Agent,
}

impl HttpEmbeddingProvider {
    pub const DEFAULT_BATCH_CAP: usize = 256;

    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(120))).build().into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            model: model.into(),
            batch_cap: Self::DEFAULT_BATCH_CAP,
            agent,
        }
    }

    /// Largest number of texts sent in one request.
    pub fn with_batch_cap(mut self, cap: usize) -> Self {
        self.batch_cap = cap.max(1);
        self
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{}", self.endpoint, route)
    }

    fn transport(&self, e: ureq::Error) -> EmbedError {
        match e {
            ureq::Error::StatusCode(code) => EmbedError::Protocol(format!("{} answered HTTP {code}", self.endpoint)),
            other => EmbedError::Unavailable(format!("{}: {other}", self.endpoint)),
        }
    }

    pub fn health(&self) -> Result<bool, EmbedError> {
        let mut resp = self.agent.get(&self.url("health")).call().map_err(|e| self.transport(e))?;
        let body = resp.body_mut().read_to_string().map_err(|e| self.transport(e))?;
        Ok(body.to_lowercase().contains("ok"))
    }

    /// Model ids served by the endpoint.
    pub fn models(&self) -> Result<Vec<String>, EmbedError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Models {
            List(Vec<String>),
            Wrapped { models: Vec<String> },
        }
        let mut resp = self.agent.get(&self.url("models")).call().map_err(|e| self.transport(e))?;
        let models: Models = resp.body_mut().read_json().map_err(|e| self.transport(e))?;
        Ok(match models {
            Models::List(v) | Models::Wrapped { models: v } => v,
        })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let req = EmbedRequest { model: &self.model, texts };
        let mut resp = self.agent.post(&self.url("embed")).send_json(&req).map_err(|e| self.transport(e))?;
        let body: EmbedResponse =
            resp.body_mut().read_json().map_err(|e| EmbedError::Protocol(format!("bad /embed response: {e}")))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::Protocol(format!(
                "/embed returned {} vectors for {} texts",
                body.vectors.len(),
                texts.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != body.dimension {
                    Err(EmbedError::DimensionMismatch { expected: body.dimension, found: v.len() })
                } else {
                    Ok(EmbeddingVector::new(v))
                }
            })
            .collect()
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_cap) {
            out.extend(self.embed_batch(chunk)?);
        }
        Ok(out)
    }
}

/// Deterministic lexical baseline: hashed word and character-trigram counts.
///
/// Needs no model weights, which makes it useful for offline smoke runs and
/// benchmarks; it is not a substitute for a sentence-embedding model.
#[derive(Debug, Clone)]
pub struct TokenHashProvider {
    dimension: usize,
    model: String,
}

impl TokenHashProvider {
    pub fn new(dimension: usize) -> Self {
        let dimension = dimension.max(8);
        Self { dimension, model: format!("token-hash-{dimension}") }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let digest = Sha256::digest(feature.as_bytes());
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&digest[..8]);
        let h = u64::from_le_bytes(raw);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        ((h % self.dimension as u64) as usize, sign)
    }

    fn vector(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0; self.dimension];
        let lowered = text.to_lowercase();
        let words: Vec<&str> = lowered.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        for w in &words {
            let (i, s) = self.bucket(&format!("w:{w}"));
            v[i] += 2.0 * s;
            let padded: Vec<char> = format!("#{w}#").chars().collect();
            for tri in padded.windows(3) {
                let (i, s) = self.bucket(&format!("t:{}", tri.iter().collect::<String>()));
                v[i] += s;
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            let (i, s) = self.bucket("<empty>");
            v[i] = s;
        }
        EmbeddingVector::new(v)
    }
}

impl EmbeddingProvider for TokenHashProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}
