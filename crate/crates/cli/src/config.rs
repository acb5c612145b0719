//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use osmfs_core::benchmark::OracleColumns;
use osmfs_core::embedding::AlignOptions;
use osmfs_core::eval::EvalOptions;
use osmfs_core::ingest::{DescriptionColumns, FsColumns, OsmColumns, PredictionColumns};
use osmfs_core::refine::{RefinementConfig, ALLOWED_K, DEFAULT_CHAT_ENDPOINT};

/// Where embeddings come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Precomputed vectors from the cache file only.
    #[default]
    File,
    /// The embedding service, with the cache in front.
    Http,
    /// Hashed token features; offline baseline.
    Hash,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Columns {
    pub osm: OsmColumns,
    pub fs: FsColumns,
    pub descriptions: DescriptionColumns,
    pub oracle: OracleColumns,
    pub predictions: PredictionColumns,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct Retrieval {
    #[serde(flatten)]
    pub options: AlignOptions,
    pub provider: ProviderKind,
    pub endpoint: String,
    pub model: String,
    /// Embedding cache; defaults to `<out>/embeddings.jsonl`.
    pub vectors: Option<PathBuf>,
    pub hash_dimension: usize,
}

impl Default for Retrieval {
    fn default() -> Self {
        Self {
            options: AlignOptions::default(),
            provider: ProviderKind::default(),
            endpoint: "http://127.0.0.1:8000".into(),
            model: "all-MiniLM-L6-v2".into(),
            vectors: None,
            hash_dimension: 384,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct Refine {
    #[serde(flatten)]
    pub config: RefinementConfig,
    pub endpoint: String,
    /// Audit log; defaults to `<out>/audit.jsonl`.
    pub audit: Option<PathBuf>,
    /// Audit logs to replay instead of calling the endpoint.
    pub replay: Vec<PathBuf>,
}

impl Default for Refine {
    fn default() -> Self {
        Self {
            config: RefinementConfig::default(),
            endpoint: DEFAULT_CHAT_ENDPOINT.into(),
            audit: None,
            replay: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub osm: Option<PathBuf>,
    pub fs: Option<PathBuf>,
    pub fs_desc: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub out: PathBuf,
    pub allow_any_k: bool,
    pub columns: Columns,
    pub retrieval: Retrieval,
    pub refine: Refine,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            osm: None,
            fs: None,
            fs_desc: None,
            oracle: None,
            out: PathBuf::from("out"),
            allow_any_k: false,
            columns: Columns::default(),
            retrieval: Retrieval::default(),
            refine: Refine::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut cfg.osm,
            &mut cfg.fs,
            &mut cfg.fs_desc,
            &mut cfg.oracle,
            &mut cfg.retrieval.vectors,
            &mut cfg.refine.audit,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        cfg.refine.replay.iter_mut().for_each(fix);
        fix(&mut cfg.out);
        Ok(cfg)
    }

    pub fn vectors_path(&self) -> PathBuf {
        self.retrieval.vectors.clone().unwrap_or_else(|| self.out.join("embeddings.jsonl"))
    }

    pub fn audit_path(&self) -> PathBuf {
        self.refine.audit.clone().unwrap_or_else(|| self.out.join("audit.jsonl"))
    }

    pub fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || (!self.allow_any_k && !ALLOWED_K.contains(&k)) {
            bail!("k = {k} is not one of {ALLOWED_K:?}; pass --allow-any-k to use it anyway");
        }
        Ok(())
    }
}

/// Returns the path if set and present on disk.
pub fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let p = path.as_ref().with_context(|| format!("{flag} is required (flag or config file)"))?;
    if !p.exists() {
        bail!("{} does not exist (given by {flag})", p.display());
    }
    Ok(p.clone())
}
