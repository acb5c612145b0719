//! Alignment of OpenStreetMap tags with the Foursquare category taxonomy.
//!
//! The pipeline has three stages: a curated oracle mapping (`benchmark`),
//! embedding-based candidate retrieval (`embedding`) and chat-model
//! re-ranking of the retrieved shortlist (`refine`). Every stage is scored
//! against the oracle by `eval`, and `report` renders the resulting tables.

pub mod benchmark;
pub mod embedding;
pub mod eval;
pub mod ingest;
pub mod refine;
pub mod report;
pub mod taxonomy;

pub use benchmark::{MatchType, OracleEntry, OracleSet};
pub use embedding::{Candidate, CandidateList, CorpusVariant, EmbeddingProvider, EmbeddingVector};
pub use eval::{depth_correct, roc_auc, DepthProfile, MetricReport};
pub use ingest::{SummaryStats, ValidationReport};
pub use refine::{PromptStrategy, RefinementConfig, RefinementResult};
pub use taxonomy::{
    is_prefix, normalize_label, truncate, CategoryPath, ElementKind, EntryId, FsCategory, FsId, FsTaxonomy, Label,
    OsmId, OsmTag, OsmTaxonomy, Taxonomy, TaxonomyError,
};
