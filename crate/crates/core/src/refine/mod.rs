//! Chat-model re-ranking of retrieved FS candidates.
//!
//! Each OSM tag's top-`k` shortlist is rendered into one of four prompts, the
//! answer is mapped back to a shortlisted category (or, where the prompt
//! allows it, to a broad fallback category) and given a surrogate score just
//! above the best candidate similarity.

mod chat;
mod prompt;

pub use chat::{
    now_unix, read_records, AuditLog, AuditRecord, ChatClient, ChatError, ChatRequest, HttpChatClient,
    ReplayChatClient, TokenBucket, API_KEY_ENV, DEFAULT_CHAT_ENDPOINT,
};
pub use prompt::{render_candidates, render_prompt, PromptStrategy};

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::OracleSet;
use crate::embedding::{text_hash, CandidateList};
use crate::eval::{top1_profile, DepthProfile};
use crate::ingest::osm_key;
use crate::taxonomy::{normalize_label, CategoryPath, FsId, FsTaxonomy, Label, OsmId, OsmTaxonomy};

/// The broad categories offered by the fallback prompts, in prompt order.
pub const FALLBACK_LABELS: [&str; 10] = [
    "landmarks outdoors",
    "business professional services",
    "travel transportation",
    "community government",
    "retail",
    "sports recreation",
    "health medicine",
    "arts entertainment",
    "dining drinking",
    "event",
];

/// Shortlist sizes the refinement step is defined for.
pub const ALLOWED_K: [usize; 6] = [5, 10, 20, 30, 40, 50];

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("cannot impute a score for an empty candidate list")]
    EmptyCandidates,
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("answer {raw:?} matches no presented candidate")]
    UnparseableAnswer { raw: String },
    #[error("fallback category {0:?} has no depth-1 counterpart in the FS taxonomy")]
    UnknownFallback(String),
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Chat(#[from] ChatError),
}

/// The ten fallback categories, each tied to the FS main-category path it stands for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FallbackSet {
    entries: Vec<(Label, CategoryPath)>,
}

impl FallbackSet {
    /// Fallback labels taken as paths verbatim.
    pub fn literal() -> Self {
        let entries = FALLBACK_LABELS
            .iter()
            .map(|l| {
                let label = Label::new(l).expect("fallback labels are valid");
                (label.clone(), CategoryPath::root(label))
            })
            .collect();
        Self { entries }
    }

    /// Ties each label to the FS main category with the same words, ignoring "and".
    pub fn resolve(fs: &FsTaxonomy) -> Result<Self, RefineError> {
        let mains = fs.main_labels();
        let entries = FALLBACK_LABELS
            .iter()
            .map(|l| {
                let label = Label::new(l).expect("fallback labels are valid");
                let main = mains
                    .iter()
                    .find(|m| m.loose_key() == label.loose_key())
                    .ok_or_else(|| RefineError::UnknownFallback((*l).to_owned()))?;
                Ok((label, CategoryPath::root(main.clone())))
            })
            .collect::<Result<_, RefineError>>()?;
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &CategoryPath> {
        self.entries.iter().map(|(_, p)| p)
    }

    pub fn contains(&self, path: &CategoryPath) -> bool {
        self.paths().any(|p| p == path)
    }

    /// Matches an answer against the fallback labels and their FS spellings.
    pub fn find(&self, answer: &Label) -> Option<&CategoryPath> {
        let key = answer.loose_key();
        self.entries.iter().find(|(l, p)| l.loose_key() == key || p.leaf().loose_key() == key).map(|(_, p)| p)
    }
}

/// Where a refined answer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Candidate,
    Fallback,
}

impl AnswerSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerSource::Candidate => "candidate",
            AnswerSource::Fallback => "fallback",
        }
    }
}

/// An answer mapped back onto the taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    pub chosen: CategoryPath,
    /// Set when the answer is a presented candidate.
    pub fs: Option<FsId>,
    pub source: AnswerSource,
}

/// Strips decoration chat models add around a bare label.
fn clean_answer(raw: &str) -> String {
    let first_line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let mut s = first_line;
    loop {
        let next = s
            .trim()
            .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*' | '“' | '”' | '‘' | '’'))
            .trim_end_matches('.');
        if next == s {
            return s.to_owned();
        }
        s = next;
    }
}

/// Maps a raw chat answer to a category.
///
/// Order: candidate leaf labels (highest score wins among repeated leaves),
/// full candidate paths, candidate labels ignoring "and", then the fallback
/// set when the strategy offers it.
pub fn parse_answer(
    raw: &str,
    candidates: &CandidateList,
    strategy: PromptStrategy,
    fallback: &FallbackSet,
) -> Result<ParsedAnswer, RefineError> {
    let unparseable = || RefineError::UnparseableAnswer { raw: raw.to_owned() };
    let cleaned = clean_answer(raw);
    let label = normalize_label(&cleaned).map_err(|_| unparseable())?;

    let best = |pred: &dyn Fn(&crate::embedding::Candidate) -> bool| {
        candidates.candidates.iter().filter(|c| pred(c)).fold(
            None::<&crate::embedding::Candidate>,
            |acc, c| match acc {
                Some(a) if a.score >= c.score => Some(a),
                _ => Some(c),
            },
        )
    };
    let as_path = CategoryPath::parse_with(&cleaned, ">").ok();
    let key = label.loose_key();
    let hit = best(&|c| c.path.leaf() == &label)
        .or_else(|| as_path.as_ref().and_then(|p| best(&|c| &c.path == p)))
        .or_else(|| best(&|c| c.path.leaf().loose_key() == key));
    if let Some(c) = hit {
        return Ok(ParsedAnswer { chosen: c.path.clone(), fs: Some(c.fs), source: AnswerSource::Candidate });
    }
    if strategy.allows_fallback() {
        if let Some(p) = fallback.find(&label) {
            return Ok(ParsedAnswer { chosen: p.clone(), fs: None, source: AnswerSource::Fallback });
        }
    }
    Err(unparseable())
}

/// Best candidate score plus `epsilon`, always strictly above every candidate score.
pub fn impute_score(candidates: &CandidateList, epsilon: f64) -> Result<f64, RefineError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(RefineError::InvalidEpsilon(epsilon));
    }
    let max = candidates.max_score().ok_or(RefineError::EmptyCandidates)?;
    let s = max + epsilon;
    // An epsilon below half an ulp of `max` would vanish in the addition.
    Ok(if s > max { s } else { max.next_up() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Extra attempts after a transient transport failure.
    pub transport_retries: u32,
    /// First backoff delay, doubled after each failure.
    pub backoff_ms: u64,
    /// Fresh asks after an answer that matches nothing.
    pub unparseable_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { transport_retries: 3, backoff_ms: 500, unparseable_retries: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub model_id: String,
    pub temperature: f64,
    pub k: usize,
    pub epsilon: f64,
    pub strategy: PromptStrategy,
    pub retry: RetryPolicy,
    /// Requests in flight at once.
    pub concurrency: usize,
    /// Average request budget; `None` disables pacing.
    pub requests_per_minute: Option<f64>,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-4o-mini".into(),
            temperature: 0.0,
            k: 20,
            epsilon: 1e-6,
            strategy: PromptStrategy::FallbackNoExample,
            retry: RetryPolicy::default(),
            concurrency: 4,
            requests_per_minute: None,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self, allow_any_k: bool) -> Result<(), RefineError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(RefineError::InvalidEpsilon(self.epsilon));
        }
        if self.k == 0 || (!allow_any_k && !ALLOWED_K.contains(&self.k)) {
            return Err(RefineError::InvalidConfig(format!("k = {} is not one of {ALLOWED_K:?}", self.k)));
        }
        if self.concurrency == 0 {
            return Err(RefineError::InvalidConfig("concurrency must be at least 1".into()));
        }
        if self.requests_per_minute.is_some_and(|r| r.is_nan() || r <= 0.0) {
            return Err(RefineError::InvalidConfig("requests_per_minute must be positive".into()));
        }
        Ok(())
    }
}

/// The refined choice for one OSM tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub osm: OsmId,
    pub chosen: CategoryPath,
    pub fs: Option<FsId>,
    pub surrogate_score: f64,
    pub source: AnswerSource,
    pub raw_answer: String,
    /// Asks needed, 1 unless the first answer was unparseable.
    pub attempts: u32,
}

/// A tag the run could not resolve.
#[derive(Debug, Clone, PartialEq)]
pub struct Unresolved {
    pub osm: OsmId,
    pub reason: String,
    pub raw_answers: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RefinementRun {
    pub results: BTreeMap<OsmId, RefinementResult>,
    pub unresolved: Vec<Unresolved>,
    /// Requests that reached the chat client.
    pub client_calls: usize,
    /// Requests answered from the audit log.
    pub cached_calls: usize,
}

impl RefinementRun {
    pub fn predictions(&self) -> BTreeMap<OsmId, CategoryPath> {
        self.results.iter().map(|(id, r)| (*id, r.chosen.clone())).collect()
    }
}

/// Read-only inputs shared by every request.
#[derive(Debug, Clone, Copy)]
pub struct RefineContext<'a> {
    pub osm: &'a OsmTaxonomy,
    pub fs: &'a FsTaxonomy,
    pub fallback: &'a FallbackSet,
}

enum TagOutcome {
    Resolved(RefinementResult),
    Unresolved(Unresolved),
}

struct Runner<'a, C: ?Sized> {
    ctx: RefineContext<'a>,
    config: &'a RefinementConfig,
    client: &'a C,
    audit: &'a AuditLog,
    bucket: Option<TokenBucket>,
    client_calls: AtomicUsize,
    cached_calls: AtomicUsize,
}

impl<C: ChatClient + ?Sized> Runner<'_, C> {
    fn ask(&self, request: &ChatRequest) -> Result<String, ChatError> {
        if let Some(answer) = self.audit.lookup(request) {
            self.cached_calls.fetch_add(1, Ordering::SeqCst);
            return Ok(answer);
        }
        let mut delay = Duration::from_millis(self.config.retry.backoff_ms);
        let mut attempt = 0;
        loop {
            if let Some(b) = &self.bucket {
                b.acquire();
            }
            self.client_calls.fetch_add(1, Ordering::SeqCst);
            match self.client.complete(request) {
                Err(e) if e.is_transient() && attempt < self.config.retry.transport_retries => {
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                other => return other,
            }
        }
    }

    fn refine_one(&self, list: &CandidateList) -> Result<TagOutcome, RefineError> {
        let tag = self.ctx.osm.get(list.osm);
        let shown = list.truncated(self.config.k);
        let prompt = render_prompt(self.config.strategy, tag, &shown, self.ctx.fs);
        let prompt_hash = text_hash(&prompt);
        let mut raw_answers = Vec::new();
        let mut reason = String::new();
        for attempt in 0..=self.config.retry.unparseable_retries {
            let request = ChatRequest {
                model: self.config.model_id.clone(),
                temperature: self.config.temperature,
                prompt: prompt.clone(),
                prompt_hash: prompt_hash.clone(),
                attempt,
            };
            let cached = self.audit.lookup(&request).is_some();
            let raw = match self.ask(&request) {
                Ok(raw) => raw,
                Err(e) => {
                    return Ok(TagOutcome::Unresolved(Unresolved { osm: list.osm, reason: e.to_string(), raw_answers }))
                }
            };
            let parsed = parse_answer(&raw, &shown, self.config.strategy, self.ctx.fallback);
            if !cached {
                self.audit.append(AuditRecord {
                    tag: osm_key(tag),
                    strategy: self.config.strategy.as_str().to_owned(),
                    k: shown.len(),
                    model: self.config.model_id.clone(),
                    prompt_hash: prompt_hash.clone(),
                    attempt,
                    raw_answer: raw.clone(),
                    resolved_path: parsed.as_ref().ok().map(|p| p.chosen.to_string()),
                    timestamp: now_unix(),
                })?;
            }
            match parsed {
                Ok(p) => {
                    return Ok(TagOutcome::Resolved(RefinementResult {
                        osm: list.osm,
                        chosen: p.chosen,
                        fs: p.fs,
                        surrogate_score: impute_score(&shown, self.config.epsilon)?,
                        source: p.source,
                        raw_answer: raw,
                        attempts: attempt + 1,
                    }))
                }
                Err(e) => {
                    reason = e.to_string();
                    raw_answers.push(raw);
                }
            }
        }
        Ok(TagOutcome::Unresolved(Unresolved { osm: list.osm, reason, raw_answers }))
    }
}

/// Refines every candidate list.
///
/// Answers already in `audit` are reused, so a rerun over the same inputs
/// makes no client calls. Tags that stay unparseable or whose requests keep
/// failing are listed in [`RefinementRun::unresolved`]; the run continues.
pub fn refine_all<C: ChatClient + ?Sized>(
    candidates: &BTreeMap<OsmId, CandidateList>,
    ctx: RefineContext<'_>,
    config: &RefinementConfig,
    client: &C,
    audit: &AuditLog,
) -> Result<RefinementRun, RefineError> {
    config.validate(true)?;
    let runner = Runner {
        ctx,
        config,
        client,
        audit,
        bucket: config.requests_per_minute.map(|r| TokenBucket::new(r, config.concurrency)),
        client_calls: AtomicUsize::new(0),
        cached_calls: AtomicUsize::new(0),
    };
    let lists: Vec<&CandidateList> = candidates.values().collect();
    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<(usize, Result<TagOutcome, RefineError>)>> = Mutex::new(Vec::new());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(list) = lists.get(i) else { break };
        let outcome = runner.refine_one(list);
        outcomes.lock().expect("outcomes poisoned").push((i, outcome));
    };
    std::thread::scope(|s| {
        for _ in 0..config.concurrency.min(lists.len()).max(1) {
            s.spawn(work);
        }
    });

    let mut outcomes = outcomes.into_inner().expect("outcomes poisoned");
    outcomes.sort_by_key(|(i, _)| *i);
    let mut run = RefinementRun::default();
    for (_, outcome) in outcomes {
        match outcome? {
            TagOutcome::Resolved(r) => {
                run.results.insert(r.osm, r);
            }
            TagOutcome::Unresolved(u) => run.unresolved.push(u),
        }
    }
    run.client_calls = runner.client_calls.into_inner();
    run.cached_calls = runner.cached_calls.into_inner();
    Ok(run)
}

/// Moves the first candidate that reaches the oracle path to the front; others keep their order.
///
/// Returns whether the list changed.
pub fn promote_oracle_match(list: &mut CandidateList, oracle_path: &CategoryPath) -> bool {
    match list.candidates.iter().position(|c| oracle_path.is_prefix_of(&c.path)) {
        Some(i) if i > 0 => {
            let c = list.candidates.remove(i);
            list.candidates.insert(0, c);
            true
        }
        _ => false,
    }
}

/// Refinement rerun with each tag's oracle match shown first.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub run: RefinementRun,
    /// Lists whose order changed.
    pub moved: usize,
    pub accuracy: DepthProfile,
}

/// Measures positional bias: promotes the oracle match within each shown
/// shortlist, refines again and scores the result against the oracle.
pub fn positional_probe<C: ChatClient + ?Sized>(
    candidates: &BTreeMap<OsmId, CandidateList>,
    oracle: &OracleSet,
    ctx: RefineContext<'_>,
    config: &RefinementConfig,
    client: &C,
    audit: &AuditLog,
) -> Result<ProbeOutcome, RefineError> {
    let mut moved = 0;
    let probed: BTreeMap<OsmId, CandidateList> = candidates
        .iter()
        .map(|(id, list)| {
            let mut shown = list.truncated(config.k);
            if let Some(entry) = oracle.get(*id) {
                moved += usize::from(promote_oracle_match(&mut shown, &entry.fs_path));
            }
            (*id, shown)
        })
        .collect();
    let run = refine_all(&probed, ctx, config, client, audit)?;
    let accuracy = top1_profile(&run.predictions(), oracle);
    Ok(ProbeOutcome { run, moved, accuracy })
}

/// Writes results as `osm_tag,rank,fs_path,score,source,raw_answer`, readable as a prediction file.
pub fn write_results<W: Write>(out: W, run: &RefinementRun, osm: &OsmTaxonomy) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["osm_tag", "rank", "fs_path", "score", "source", "raw_answer"])?;
    for r in run.results.values() {
        w.write_record([
            osm_key(osm.get(r.osm)).as_str(),
            "1",
            &r.chosen.to_string(),
            &r.surrogate_score.to_string(),
            r.source.as_str(),
            &r.raw_answer,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the unresolved sidecar as `osm_tag,reason,raw_answers` (answers joined by " | ").
pub fn write_unresolved<W: Write>(out: W, run: &RefinementRun, osm: &OsmTaxonomy) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["osm_tag", "reason", "raw_answers"])?;
    for u in &run.unresolved {
        w.write_record([osm_key(osm.get(u.osm)).as_str(), &u.reason, &u.raw_answers.join(" | ")])?;
    }
    w.flush()?;
    Ok(())
}
