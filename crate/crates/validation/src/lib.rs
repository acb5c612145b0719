//! Loads a data directory laid out as the acceptance checks expect.
//!
//! ```text
//! $OSMFS_DATA_DIR/
//!   osm.csv  fs.csv  oracle.csv      taxonomies and the manual benchmark
//!   fs_desc.csv                      optional FS descriptions (leaf,description)
//!   candidates/<model>_<fi|fid>.csv  ranked candidate lists per model and corpus variant
//!   refined/<strategy>_k<k>.csv      stored refinement outputs, `_probe` for the positional probe
//!   audit/*.jsonl                    chat audit logs to replay
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use osmfs_core::benchmark::{load_oracle, OracleColumns};
use osmfs_core::embedding::candidate_lists_from;
use osmfs_core::ingest::{
    load_descriptions, load_fs, load_osm, load_predictions, DescriptionColumns, FsColumns, OsmColumns,
    PredictionColumns,
};
use osmfs_core::{CandidateList, CorpusVariant, FsTaxonomy, OracleSet, OsmId, OsmTaxonomy};

pub const DATA_ENV: &str = "OSMFS_DATA_DIR";
pub const EMBED_ENDPOINT_ENV: &str = "OSMFS_EMBED_ENDPOINT";

/// The data directory from [`DATA_ENV`], or why it is unusable.
pub fn data_dir() -> Result<PathBuf, String> {
    let dir = std::env::var_os(DATA_ENV).map(PathBuf::from).ok_or_else(|| {
        format!("blocked: {DATA_ENV} is not set; the released taxonomy, oracle and prediction files are required")
    })?;
    if !dir.is_dir() {
        return Err(format!("blocked: {} is not a directory", dir.display()));
    }
    Ok(dir)
}

pub fn require(path: PathBuf) -> Result<PathBuf, String> {
    if path.exists() {
        Ok(path)
    } else {
        Err(format!("blocked: {} does not exist", path.display()))
    }
}

pub struct Dataset {
    pub dir: PathBuf,
    pub osm: OsmTaxonomy,
    pub fs: FsTaxonomy,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, String> {
        let osm = load_osm(&require(dir.join("osm.csv"))?, &OsmColumns::default()).map_err(|e| e.to_string())?;
        let mut fs = load_fs(&require(dir.join("fs.csv"))?, &FsColumns::default()).map_err(|e| e.to_string())?;
        let desc = dir.join("fs_desc.csv");
        if desc.exists() {
            fs = load_descriptions(&fs.value, &desc, &DescriptionColumns::default()).map_err(|e| e.to_string())?;
        }
        Ok(Dataset { dir: dir.to_owned(), osm: osm.value, fs: fs.value })
    }

    pub fn oracle(&self) -> Result<OracleSet, String> {
        let path = require(self.dir.join("oracle.csv"))?;
        load_oracle(&path, &OracleColumns::default(), &self.osm, &self.fs).map(|(o, _)| o).map_err(|e| e.to_string())
    }

    pub fn candidates(&self, path: &Path, variant: CorpusVariant) -> Result<BTreeMap<OsmId, CandidateList>, String> {
        let set = load_predictions(path, &PredictionColumns::default(), &self.osm)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        candidate_lists_from(&set, &self.fs, variant).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn top1_file(&self, path: &Path) -> Result<BTreeMap<OsmId, osmfs_core::CategoryPath>, String> {
        let set = load_predictions(path, &PredictionColumns::default(), &self.osm)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(set.top1())
    }

    /// Every `candidates/*.csv`, with the variant taken from the `_fi`/`_fid` suffix.
    pub fn candidate_files(&self) -> Result<Vec<(String, CorpusVariant, PathBuf)>, String> {
        let dir = require(self.dir.join("candidates"))?;
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else { continue };
            let variant = if stem.ends_with("_fid") {
                CorpusVariant::Fid
            } else if stem.ends_with("_fi") {
                CorpusVariant::Fi
            } else {
                continue;
            };
            out.push((stem, variant, path));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        if out.is_empty() {
            return Err(format!("blocked: no <model>_<fi|fid>.csv files in {}", dir.display()));
        }
        Ok(out)
    }
}
