//! The curated OSM → FS oracle mapping and its descriptive statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    self, cell, check_distinct, csv_reader, line_of, Headers, IngestError, OsmResolver, PathColumns, ResolvedPath,
    ValidationReport,
};
use crate::taxonomy::{CategoryPath, FsTaxonomy, Label, OsmId, OsmTaxonomy};

/// How a curator justified an oracle correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchType {
    /// Same label in both taxonomies.
    Lexical,
    /// Different labels denoting the same concept.
    Semantic,
    /// No FS subcategory fits; the tag is filed under an FS main category.
    MainCategory,
}

impl MatchType {
    pub const ALL: [MatchType; 3] = [MatchType::Lexical, MatchType::Semantic, MatchType::MainCategory];

    pub fn as_str(self) -> &'static str {
        match self {
            MatchType::Lexical => "lexical",
            MatchType::Semantic => "semantic",
            MatchType::MainCategory => "main_category",
        }
    }
}

impl fmt::Display for MatchType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_lowercase().replace(['_', '-'], " ");
        match key.as_str() {
            "lexical" | "lexical match" | "exact" | "exact match" | "perfect match" => Ok(MatchType::Lexical),
            "semantic" | "semantic match" | "semantically validated" => Ok(MatchType::Semantic),
            "main category" | "main" | "main category match" | "main category only" | "structural" => {
                Ok(MatchType::MainCategory)
            }
            _ => Err(format!("unknown match type {s:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("line {line}: FS path {path:?} is not a node of the FS taxonomy")]
    UnknownFsPath { line: u64, path: String },
    #[error("line {line}: {tag} already has an oracle entry (line {first_line})")]
    DuplicateOsmTag { line: u64, tag: String, first_line: u64 },
    #[error("line {line}: unknown match type {value:?}")]
    UnknownMatchType { line: u64, value: String },
    #[error("line {line}: main-category match for {tag} must have a depth-1 FS path, got {path}")]
    MainCategoryDepth { line: u64, tag: String, path: String },
}

/// One curated correspondence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub osm: OsmId,
    pub fs_path: CategoryPath,
    pub match_type: MatchType,
}

/// The oracle, one entry per OSM tag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleSet {
    entries: BTreeMap<OsmId, OracleEntry>,
}

impl OracleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry, returning the previous one for the same tag.
    pub fn insert(&mut self, entry: OracleEntry) -> Option<OracleEntry> {
        self.entries.insert(entry.osm, entry)
    }

    pub fn get(&self, osm: OsmId) -> Option<&OracleEntry> {
        self.entries.get(&osm)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in OSM taxonomy order.
    pub fn iter(&self) -> impl Iterator<Item = &OracleEntry> {
        self.entries.values()
    }

    pub fn count(&self, match_type: MatchType) -> usize {
        self.iter().filter(|e| e.match_type == match_type).count()
    }

    /// Distinct FS paths used anywhere in the oracle.
    pub fn distinct_fs_paths(&self) -> BTreeSet<&CategoryPath> {
        self.iter().map(|e| &e.fs_path).collect()
    }
}

impl FromIterator<OracleEntry> for OracleSet {
    fn from_iter<I: IntoIterator<Item = OracleEntry>>(iter: I) -> Self {
        let mut set = OracleSet::new();
        for e in iter {
            set.insert(e);
        }
        set
    }
}

/// Column headers of the oracle file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleColumns {
    /// OSM tag label or full OSM path.
    pub osm_tag: String,
    /// Optional OSM key column for repeated tag labels.
    pub osm_key: Option<String>,
    pub fs_path: PathColumns,
    pub match_type: String,
    /// Extra spellings of match types, e.g. `"perfect" = "lexical"`.
    pub match_aliases: BTreeMap<String, MatchType>,
}

impl Default for OracleColumns {
    fn default() -> Self {
        Self {
            osm_tag: "osm_tag".into(),
            osm_key: None,
            fs_path: PathColumns::Joined { column: "fs_path".into(), separator: ">".into() },
            match_type: "match_type".into(),
            match_aliases: BTreeMap::new(),
        }
    }
}

impl OracleColumns {
    fn match_type(&self, raw: &str) -> Option<MatchType> {
        let key = raw.trim().to_lowercase();
        self.match_aliases
            .iter()
            .find(|(alias, _)| alias.trim().to_lowercase() == key)
            .map(|(_, m)| *m)
            .or_else(|| raw.parse().ok())
    }
}

/// Loads and cross-validates the oracle.
///
/// FS paths must be nodes of the FS taxonomy. A path that only differs by
/// connective words ("landmarks outdoors" vs "landmarks and outdoors") is
/// rewritten to the taxonomy's spelling and reported as a warning.
pub fn read_oracle<R: Read>(
    input: R,
    columns: &OracleColumns,
    osm: &OsmTaxonomy,
    fs: &FsTaxonomy,
    name: &str,
) -> Result<(OracleSet, ValidationReport), OracleError> {
    let path_headers: Vec<&str> = match &columns.fs_path {
        PathColumns::Levels(cols) => cols.iter().map(String::as_str).collect(),
        PathColumns::Joined { column, .. } => vec![column.as_str()],
    };
    let mut names = vec![columns.osm_tag.as_str(), columns.match_type.as_str()];
    names.extend(columns.osm_key.as_deref());
    names.extend(path_headers);
    check_distinct(&names)?;

    let mut reader = csv_reader(input);
    let headers = Headers::new(reader.headers().map_err(|e| IngestError::Csv { line: 1, source: e })?);
    let tag_idx = headers.require(&columns.osm_tag)?;
    let key_idx = headers.optional(columns.osm_key.as_deref())?;
    let type_idx = headers.require(&columns.match_type)?;
    let path_spec = ResolvedPath::new(&headers, &columns.fs_path)?;

    let mut report = ValidationReport::new(name);
    let mut resolver = OsmResolver::new(osm);
    let mut first_line: HashMap<OsmId, u64> = HashMap::new();
    let mut set = OracleSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError::Csv { line: e.position().map_or(0, |p| p.line()), source: e })?;
        let line = line_of(&record);
        let raw_tag = cell(&record, tag_idx).unwrap_or_default();
        let key = key_idx.and_then(|i| cell(&record, i));
        let osm_id = resolver.resolve(line, raw_tag, key, true)?;
        let tag = osm.get(osm_id).path.to_string();

        let raw_type = cell(&record, type_idx).unwrap_or_default();
        let match_type = columns
            .match_type(raw_type)
            .ok_or_else(|| OracleError::UnknownMatchType { line, value: raw_type.to_owned() })?;

        let parsed =
            path_spec.read(&record)?.ok_or_else(|| OracleError::UnknownFsPath { line, path: String::new() })?;
        let fs_path = if fs.contains_node(&parsed) {
            parsed
        } else if let Some(found) = fs.resolve_loose(&parsed) {
            report.warn(line, format!("FS path {parsed} read as {found}"));
            found.clone()
        } else {
            return Err(OracleError::UnknownFsPath { line, path: parsed.to_string() });
        };

        if match_type == MatchType::MainCategory && fs_path.depth() != 1 {
            return Err(OracleError::MainCategoryDepth { line, tag, path: fs_path.to_string() });
        }
        if let Some(&first) = first_line.get(&osm_id) {
            return Err(OracleError::DuplicateOsmTag { line, tag, first_line: first });
        }
        first_line.insert(osm_id, line);
        set.insert(OracleEntry { osm: osm_id, fs_path, match_type });
    }
    Ok((set, report))
}

pub fn load_oracle(
    path: &Path,
    columns: &OracleColumns,
    osm: &OsmTaxonomy,
    fs: &FsTaxonomy,
) -> Result<(OracleSet, ValidationReport), OracleError> {
    let file =
        std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    read_oracle(file, columns, osm, fs, &path.display().to_string())
}

/// Writes the oracle with full OSM and FS paths; `read_oracle` with default columns reads it back.
pub fn write_oracle<W: Write>(out: W, oracle: &OracleSet, osm: &OsmTaxonomy) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["osm_tag", "fs_path", "match_type"])?;
    for e in oracle.iter() {
        w.write_record([ingest::osm_key(osm.get(e.osm)), e.fs_path.to_string(), e.match_type.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the FS main-category coverage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub main: Label,
    /// Distinct FS paths under `main` used by the oracle.
    pub used: usize,
    /// FS categories (at any depth) under `main`.
    pub available: usize,
    pub pct: f64,
}

/// Coverage of each FS main category by the oracle, sorted by main label.
pub fn coverage_by_fs_main(oracle: &OracleSet, fs: &FsTaxonomy) -> Vec<CoverageRow> {
    let mut available: BTreeMap<&Label, usize> = BTreeMap::new();
    for c in fs.entries() {
        *available.entry(c.path.main()).or_insert(0) += 1;
    }
    let mut used: BTreeMap<&Label, BTreeSet<&CategoryPath>> = BTreeMap::new();
    for path in oracle.distinct_fs_paths() {
        used.entry(path.main()).or_default().insert(path);
    }
    available
        .into_iter()
        .map(|(main, available)| {
            let used = used.get(main).map_or(0, BTreeSet::len);
            let pct = crate::eval::percent(used, available);
            CoverageRow { main: main.clone(), used, available, pct }
        })
        .collect()
}

/// Per-match-type counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub lexical: usize,
    pub semantic: usize,
    pub main_category: usize,
}

impl MatchCounts {
    pub fn add(&mut self, match_type: MatchType) {
        match match_type {
            MatchType::Lexical => self.lexical += 1,
            MatchType::Semantic => self.semantic += 1,
            MatchType::MainCategory => self.main_category += 1,
        }
    }

    pub fn get(&self, match_type: MatchType) -> usize {
        match match_type {
            MatchType::Lexical => self.lexical,
            MatchType::Semantic => self.semantic,
            MatchType::MainCategory => self.main_category,
        }
    }

    pub fn total(&self) -> usize {
        self.lexical + self.semantic + self.main_category
    }
}

/// Match-type counts per FS main category of the oracle path.
///
/// Every FS main category gets a row, including unused ones.
pub fn match_type_histogram(oracle: &OracleSet, fs: &FsTaxonomy) -> BTreeMap<Label, MatchCounts> {
    let mut table: BTreeMap<Label, MatchCounts> =
        fs.main_labels().into_iter().map(|m| (m, MatchCounts::default())).collect();
    for e in oracle.iter() {
        table.entry(e.fs_path.main().clone()).or_default().add(e.match_type);
    }
    table
}

pub fn write_coverage_csv<W: Write>(out: W, rows: &[CoverageRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fs_main", "used", "available", "coverage_pct"])?;
    for r in rows {
        w.write_record([r.main.to_string(), r.used.to_string(), r.available.to_string(), format!("{:.2}", r.pct)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(out: W, table: &BTreeMap<Label, MatchCounts>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fs_main", "lexical", "semantic", "main_category", "total"])?;
    for (main, c) in table {
        w.write_record([
            main.to_string(),
            c.lexical.to_string(),
            c.semantic.to_string(),
            c.main_category.to_string(),
            c.total().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{read_fs, read_osm, FsColumns, OsmColumns};

    const FS: &str = "\
Depth_1,Depth_2,Depth_3,Depth_4,Depth_5,Depth_6
Sports and Recreation,,,,,
Sports and Recreation,Water Sports,,,,
Sports and Recreation,Water Sports,Scuba Diving Instructor,,,
Landmarks and Outdoors,,,,,
Landmarks and Outdoors,Stable,,,,
Landmarks and Outdoors,Lake,,,,
Nightlife Spot,,,,,
Nightlife Spot,Bar,,,,
";

    const OSM: &str = "\
Depth_1,Depth_2,Depth_3,Description
aerialway,zip line,,A zip line.
amenity,dive centre,,Diving school.
building,riding hall,,A hall for horse riding.
natural,water,,Open water.
";

    fn taxonomies() -> (OsmTaxonomy, FsTaxonomy) {
        let fs_cols = FsColumns { tag: None, depth: None, ..FsColumns::default() };
        let osm_cols = OsmColumns { tag: None, depth: None, element: None, ..OsmColumns::default() };
        (
            read_osm(OSM.as_bytes(), &osm_cols, "osm").unwrap().value,
            read_fs(FS.as_bytes(), &fs_cols, "fs").unwrap().value,
        )
    }

    fn load(csv: &str) -> Result<(OracleSet, ValidationReport), OracleError> {
        let (osm, fs) = taxonomies();
        read_oracle(csv.as_bytes(), &OracleColumns::default(), &osm, &fs, "oracle")
    }

    #[test]
    fn loads_all_three_match_types() {
        let (set, report) = load(
            "osm_tag,fs_path,match_type\n\
             zip line,sports recreation,main_category\n\
             dive centre,Sports and Recreation > Water Sports > Scuba Diving Instructor,semantic\n\
             water,Landmarks and Outdoors > Lake,Semantic\n",
        )
        .unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.count(MatchType::MainCategory), 1);
        assert_eq!(set.count(MatchType::Semantic), 2);
        // "sports recreation" resolved to the taxonomy spelling.
        assert_eq!(report.warnings.len(), 1);
        let zip = set.iter().next().unwrap();
        assert_eq!(zip.fs_path.to_string(), "sports and recreation");
    }

    #[test]
    fn unknown_fs_path() {
        let err = load("osm_tag,fs_path,match_type\nzip line,nonexistent,semantic\n").unwrap_err();
        assert!(matches!(err, OracleError::UnknownFsPath { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_osm_tag() {
        let err = load("osm_tag,fs_path,match_type\nzzz,nightlife spot,semantic\n").unwrap_err();
        assert!(matches!(err, OracleError::Ingest(IngestError::UnknownOsmTag { .. })), "{err}");
    }

    #[test]
    fn duplicate_osm_tag() {
        let err = load(
            "osm_tag,fs_path,match_type\nnatural > water,nightlife spot,semantic\nnatural > water,landmarks and outdoors,semantic\n",
        )
        .unwrap_err();
        assert!(matches!(err, OracleError::DuplicateOsmTag { line: 3, first_line: 2, .. }), "{err}");
    }

    #[test]
    fn main_category_requires_depth_one() {
        let err = load("osm_tag,fs_path,match_type\nwater,landmarks and outdoors > lake,main category\n").unwrap_err();
        assert!(matches!(err, OracleError::MainCategoryDepth { .. }), "{err}");
    }

    #[test]
    fn match_type_aliases() {
        let (osm, fs) = taxonomies();
        let mut cols = OracleColumns::default();
        cols.match_aliases.insert("Perfect".into(), MatchType::Lexical);
        let (set, _) = read_oracle(
            "osm_tag,fs_path,match_type\nwater,landmarks and outdoors,perfect\n".as_bytes(),
            &cols,
            &osm,
            &fs,
            "o",
        )
        .unwrap();
        assert_eq!(set.count(MatchType::Lexical), 1);
        let err = load("osm_tag,fs_path,match_type\nwater,landmarks and outdoors,maybe\n").unwrap_err();
        assert!(matches!(err, OracleError::UnknownMatchType { .. }));
    }

    #[test]
    fn coverage_and_histogram() {
        let (set, _) = load(
            "osm_tag,fs_path,match_type\n\
             zip line,sports and recreation,main_category\n\
             dive centre,sports and recreation > water sports > scuba diving instructor,semantic\n\
             riding hall,landmarks and outdoors > stable,semantic\n\
             water,landmarks and outdoors > stable,lexical\n",
        )
        .unwrap();
        let (_, fs) = taxonomies();
        let rows = coverage_by_fs_main(&set, &fs);
        let by_main: BTreeMap<&str, &CoverageRow> = rows.iter().map(|r| (r.main.as_str(), r)).collect();
        assert_eq!((by_main["landmarks and outdoors"].used, by_main["landmarks and outdoors"].available), (1, 3));
        assert_eq!((by_main["sports and recreation"].used, by_main["sports and recreation"].available), (2, 3));
        assert_eq!((by_main["nightlife spot"].used, by_main["nightlife spot"].available), (0, 2));
        assert_eq!(by_main["nightlife spot"].pct, 0.0);
        assert!(rows.iter().all(|r| r.used <= r.available));
        assert_eq!(set.distinct_fs_paths().len(), 3);

        let hist = match_type_histogram(&set, &fs);
        assert_eq!(hist.values().map(MatchCounts::total).sum::<usize>(), set.len());
        assert_eq!(hist[&Label::new("nightlife spot").unwrap()], MatchCounts::default());
        assert_eq!(hist[&Label::new("landmarks and outdoors").unwrap()].lexical, 1);

        let mut buf = Vec::new();
        write_coverage_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("landmarks and outdoors,1,3,33.33\n"), "{text}");
    }

    #[test]
    fn empty_oracle_histogram_is_all_zero() {
        let (_, fs) = taxonomies();
        let hist = match_type_histogram(&OracleSet::new(), &fs);
        assert_eq!(hist.len(), 3);
        assert!(hist.values().all(|c| c.total() == 0));
    }

    #[test]
    fn write_then_read_round_trip() {
        let (osm, fs) = taxonomies();
        let (set, _) = load("osm_tag,fs_path,match_type\nwater,landmarks and outdoors > lake,lexical\nzip line,sports and recreation,main_category\n").unwrap();
        let mut buf = Vec::new();
        write_oracle(&mut buf, &set, &osm).unwrap();
        let (back, report) = read_oracle(buf.as_slice(), &OracleColumns::default(), &osm, &fs, "rt").unwrap();
        assert_eq!(back, set);
        assert!(report.is_clean());
    }
}
