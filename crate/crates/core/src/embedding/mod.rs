//! Embedding-based candidate retrieval.
//!
//! FS categories and OSM tags become short texts embedded by an
//! [`EmbeddingProvider`]. Each OSM tag is then ranked against the whole FS
//! corpus by cosine similarity over vectors normalized once.

mod provider;

pub use provider::{
    text_hash, CachedProvider, EmbeddingCache, EmbeddingProvider, HttpEmbeddingProvider, TokenHashProvider,
    VectorFileProvider,
};

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{osm_key, IngestError, PredictionSet};
use crate::taxonomy::{CategoryPath, FsCategory, FsId, FsTaxonomy, OsmId, OsmTag, OsmTaxonomy};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("vector dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot compute similarity with a zero vector")]
    ZeroVector,
    #[error("embedding provider unavailable: {0}")]
    Unavailable(String),
    #[error("embedding protocol error: {0}")]
    Protocol(String),
    #[error("no cached vector for text {text:?}")]
    MissingVector { text: String },
    #[error("{0}")]
    Io(String),
    #[error("the FS corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding stopped after {embedded} of {total} texts: {source}")]
    Partial {
        embedded: usize,
        total: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("line {line}: {reason}")]
    InvalidCandidates { line: u64, reason: String },
}

/// Which FS text is embedded: labels only (FI) or labels with descriptions (FID).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusVariant {
    Fi,
    Fid,
}

impl CorpusVariant {
    pub const ALL: [CorpusVariant; 2] = [CorpusVariant::Fi, CorpusVariant::Fid];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusVariant::Fi => "fi",
            CorpusVariant::Fid => "fid",
        }
    }
}

impl fmt::Display for CorpusVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl FromStr for CorpusVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "fi" => Ok(CorpusVariant::Fi),
            "fid" => Ok(CorpusVariant::Fid),
            other => Err(format!("unknown corpus variant {other:?} (expected fi or fid)")),
        }
    }
}

/// How the OSM side of the query is composed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OsmQueryMode {
    /// `"label: description"`.
    #[default]
    LabelAndDescription,
    /// The description alone (the label when there is none).
    DescriptionOnly,
}

impl FromStr for OsmQueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "label_and_description" | "label_description" => Ok(OsmQueryMode::LabelAndDescription),
            "description_only" => Ok(OsmQueryMode::DescriptionOnly),
            other => Err(format!("unknown OSM query mode {other:?}")),
        }
    }
}

/// A raw embedding as returned by a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Self {
        Self(components)
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Unit-length copy of the vector.
    pub fn normalized(&self) -> Result<Vec<f64>, EmbedError> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(EmbedError::ZeroVector);
        }
        Ok(self.0.iter().map(|x| x / n).collect())
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    if u.dimension() != v.dimension() {
        return Err(EmbedError::DimensionMismatch { expected: u.dimension(), found: v.dimension() });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn non_empty(s: Option<&str>) -> Option<&str> {
    s.map(str::trim).filter(|s| !s.is_empty())
}

/// Text embedded for an FS category. FID without a description falls back to the label.
pub fn build_fs_text(c: &FsCategory, variant: CorpusVariant) -> String {
    let label = c.leaf().as_str();
    match (variant, non_empty(c.description.as_deref())) {
        (CorpusVariant::Fid, Some(desc)) => format!("{label}: {desc}"),
        _ => label.to_owned(),
    }
}

/// Query text for an OSM tag; the description is kept verbatim.
pub fn build_osm_query(t: &OsmTag, mode: OsmQueryMode) -> String {
    let label = t.tag().as_str();
    match (mode, non_empty(Some(&t.description))) {
        (_, None) => label.to_owned(),
        (OsmQueryMode::LabelAndDescription, Some(desc)) => format!("{label}: {desc}"),
        (OsmQueryMode::DescriptionOnly, Some(desc)) => desc.to_owned(),
    }
}

/// FS texts in taxonomy order plus one warning per FID fallback.
pub fn corpus_texts(fs: &FsTaxonomy, variant: CorpusVariant) -> (Vec<String>, Vec<String>) {
    let mut warnings = Vec::new();
    let texts = fs
        .entries()
        .iter()
        .map(|c| {
            if variant == CorpusVariant::Fid && non_empty(c.description.as_deref()).is_none() {
                warnings.push(format!("no description for {}; embedding the label alone", c.path));
            }
            build_fs_text(c, variant)
        })
        .collect();
    (texts, warnings)
}

/// One ranked FS candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub fs: FsId,
    pub path: CategoryPath,
    pub score: f64,
}

/// Ranked FS candidates for one OSM tag, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub osm: OsmId,
    pub variant: CorpusVariant,
    pub k: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn top1(&self) -> Option<&Candidate> {
        self.candidates.first()
    }

    /// The first `k` candidates as a list of their own.
    pub fn truncated(&self, k: usize) -> CandidateList {
        CandidateList {
            osm: self.osm,
            variant: self.variant,
            k,
            candidates: self.candidates.iter().take(k).cloned().collect(),
        }
    }

    pub fn max_score(&self) -> Option<f64> {
        self.candidates.iter().map(|c| c.score).reduce(f64::max)
    }

    /// Builds a list from already-ranked candidates, keeping the stated order.
    pub fn from_ranked(osm: OsmId, variant: CorpusVariant, candidates: Vec<Candidate>) -> Self {
        Self { osm, variant, k: candidates.len(), candidates }
    }
}

/// The FS corpus as unit vectors, ready for ranking.
#[derive(Debug, Clone)]
pub struct Corpus {
    ids: Vec<FsId>,
    paths: Vec<CategoryPath>,
    keys: Vec<String>,
    unit: Vec<Vec<f64>>,
    dimension: usize,
}

impl Corpus {
    pub fn new(items: Vec<(FsId, CategoryPath, EmbeddingVector)>) -> Result<Self, EmbedError> {
        let dimension = items.first().ok_or(EmbedError::EmptyCorpus)?.2.dimension();
        let mut corpus = Corpus {
            ids: Vec::with_capacity(items.len()),
            paths: Vec::with_capacity(items.len()),
            keys: Vec::with_capacity(items.len()),
            unit: Vec::with_capacity(items.len()),
            dimension,
        };
        for (id, path, v) in items {
            if v.dimension() != dimension {
                return Err(EmbedError::DimensionMismatch { expected: dimension, found: v.dimension() });
            }
            corpus.unit.push(v.normalized()?);
            corpus.keys.push(path.to_string());
            corpus.paths.push(path);
            corpus.ids.push(id);
        }
        Ok(corpus)
    }

    /// Corpus over every FS category, `vectors` given in taxonomy order.
    pub fn from_taxonomy(fs: &FsTaxonomy, vectors: Vec<EmbeddingVector>) -> Result<Self, EmbedError> {
        if vectors.len() != fs.len() {
            return Err(EmbedError::Protocol(format!("{} vectors for {} FS categories", vectors.len(), fs.len())));
        }
        Self::new(fs.iter().zip(vectors).map(|((id, c), v)| (id, c.path.clone(), v)).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Cosine of `query` with every corpus entry, in corpus order.
    pub fn scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>, EmbedError> {
        if query.dimension() != self.dimension {
            return Err(EmbedError::DimensionMismatch { expected: self.dimension, found: query.dimension() });
        }
        let q = query.normalized()?;
        // Adding 0.0 folds -0.0 into +0.0 so exact ties stay ties under `total_cmp`.
        Ok(self.unit.iter().map(|u| dot(&q, u).clamp(-1.0, 1.0) + 0.0).collect())
    }

    /// Top `k` entries by descending cosine; equal scores order by serialized path.
    pub fn rank(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Candidate>, EmbedError> {
        if k == 0 {
            return Err(EmbedError::InvalidK);
        }
        let scores = self.scores(query)?;
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            scores[b].total_cmp(&scores[a]).then_with(|| self.keys[a].cmp(&self.keys[b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Candidate { fs: self.ids[i], path: self.paths[i].clone(), score: scores[i] })
            .collect())
    }
}

/// Ranks `corpus` against `query`; see [`Corpus::rank`].
pub fn rank(query: &EmbeddingVector, corpus: &Corpus, k: usize) -> Result<Vec<Candidate>, EmbedError> {
    corpus.rank(query, k)
}

/// Settings for [`align_all`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignOptions {
    pub variant: CorpusVariant,
    pub k: usize,
    pub osm_query: OsmQueryMode,
    /// Texts per provider call.
    pub batch_size: usize,
    /// Provider calls allowed in flight at once.
    pub in_flight: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { variant: CorpusVariant::Fid, k: 50, osm_query: OsmQueryMode::default(), batch_size: 64, in_flight: 1 }
    }
}

/// Candidate lists for every OSM tag, keyed in taxonomy order.
#[derive(Debug, Clone, Default)]
pub struct Alignment {
    pub lists: BTreeMap<OsmId, CandidateList>,
    pub warnings: Vec<String>,
}

/// Embeds `texts` in batches with up to `in_flight` concurrent provider calls.
///
/// Output order matches input order regardless of completion order.
pub fn embed_batched<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    texts: &[String],
    batch_size: usize,
    in_flight: usize,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    let chunks: Vec<&[String]> = texts.chunks(batch_size.max(1)).collect();
    let slots: Mutex<Vec<Option<Vec<EmbeddingVector>>>> = Mutex::new(vec![None; chunks.len()]);
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<EmbedError>> = Mutex::new(None);

    let work = || {
        while !failed.load(AtomicOrdering::SeqCst) {
            let i = next.fetch_add(1, AtomicOrdering::SeqCst);
            let Some(chunk) = chunks.get(i) else { break };
            match provider.embed(chunk) {
                Ok(v) if v.len() == chunk.len() => slots.lock().expect("slots poisoned")[i] = Some(v),
                Ok(v) => {
                    let err = EmbedError::Protocol(format!("{} vectors for {} texts", v.len(), chunk.len()));
                    failed.store(true, AtomicOrdering::SeqCst);
                    first_error.lock().expect("error slot poisoned").get_or_insert(err);
                }
                Err(e) => {
                    failed.store(true, AtomicOrdering::SeqCst);
                    first_error.lock().expect("error slot poisoned").get_or_insert(e);
                }
            }
        }
    };
    let workers = in_flight.clamp(1, chunks.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let slots = slots.into_inner().expect("slots poisoned");
    if let Some(source) = first_error.into_inner().expect("error slot poisoned") {
        let embedded = slots.iter().flatten().map(Vec::len).sum();
        return Err(EmbedError::Partial { embedded, total: texts.len(), source: Box::new(source) });
    }
    Ok(slots.into_iter().flatten().flatten().collect())
}

/// Retrieves the top-`k` FS candidates for every OSM tag.
///
/// Wrap the provider in a [`CachedProvider`] to make an interrupted run resumable.
pub fn align_all<P: EmbeddingProvider + ?Sized>(
    osm: &OsmTaxonomy,
    fs: &FsTaxonomy,
    provider: &P,
    options: &AlignOptions,
) -> Result<Alignment, EmbedError> {
    if options.k == 0 {
        return Err(EmbedError::InvalidK);
    }
    if fs.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let (fs_texts, warnings) = corpus_texts(fs, options.variant);
    let queries: Vec<String> = osm.entries().iter().map(|t| build_osm_query(t, options.osm_query)).collect();

    let fs_vectors = embed_batched(provider, &fs_texts, options.batch_size, options.in_flight)?;
    let corpus = Corpus::from_taxonomy(fs, fs_vectors)?;
    let query_vectors = embed_batched(provider, &queries, options.batch_size, options.in_flight)?;

    let lists = osm
        .iter()
        .zip(query_vectors)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|((id, _), q)| {
            let candidates = corpus.rank(&q, options.k)?;
            Ok((id, CandidateList { osm: id, variant: options.variant, k: options.k, candidates }))
        })
        .collect::<Result<BTreeMap<_, _>, EmbedError>>()?;
    Ok(Alignment { lists, warnings })
}

/// Writes candidate lists as `osm_tag,rank,fs_path,score`, ordered by tag then rank.
///
/// Scores use the shortest representation that round-trips, so the file is
/// bit-stable and re-reads to identical values.
pub fn write_candidates<W: Write>(
    out: W,
    lists: &BTreeMap<OsmId, CandidateList>,
    osm: &OsmTaxonomy,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["osm_tag", "rank", "fs_path", "score"])?;
    for (id, list) in lists {
        let tag = osm_key(osm.get(*id));
        for (i, c) in list.candidates.iter().enumerate() {
            w.write_record([tag.as_str(), &(i + 1).to_string(), &c.path.to_string(), &c.score.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds candidate lists from a prediction file read by [`crate::ingest::read_predictions`].
///
/// Every row needs a score and an FS path that is a full FS category.
pub fn candidate_lists_from(
    set: &PredictionSet,
    fs: &FsTaxonomy,
    variant: CorpusVariant,
) -> Result<BTreeMap<OsmId, CandidateList>, EmbedError> {
    let mut out = BTreeMap::new();
    for (osm, rows) in set.by_tag() {
        let mut seen = HashSet::new();
        let mut candidates = Vec::with_capacity(rows.len());
        for r in rows {
            let fs_id = *fs
                .by_path(&r.predicted)
                .first()
                .ok_or_else(|| IngestError::UnknownFsPath { line: r.line, path: r.predicted.to_string() })?;
            let score = r
                .score
                .ok_or_else(|| EmbedError::InvalidCandidates { line: r.line, reason: "missing score".into() })?;
            if !seen.insert(fs_id) {
                return Err(EmbedError::InvalidCandidates {
                    line: r.line,
                    reason: format!("{} listed twice for the same tag", r.predicted),
                });
            }
            candidates.push(Candidate { fs: fs_id, path: r.predicted.clone(), score });
        }
        out.insert(osm, CandidateList::from_ranked(osm, variant, candidates));
    }
    Ok(out)
}
