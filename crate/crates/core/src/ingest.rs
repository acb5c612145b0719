//! Loading and validation of the cleaned taxonomy CSVs and archived prediction files.
//!
//! Column headers are never hard-coded in the loaders: every file kind has a
//! column mapping with defaults that can be overridden from configuration.
//! Header lookup is case-insensitive and treats `_`, `-` and spaces alike, so
//! `Depth_1` and `depth 1` name the same column.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{
    normalize_label, CategoryPath, ElementKind, Entry, FsCategory, FsId, FsTaxonomy, Label, OsmId, OsmTag, OsmTaxonomy,
    Taxonomy, TaxonomyError, MAX_DEPTH, PATH_SEPARATOR,
};

/// Deepest level of the cleaned OSM taxonomy.
pub const OSM_MAX_DEPTH: usize = 3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV near line {line}: {source}")]
    Csv {
        line: u64,
        #[source]
        source: csv::Error,
    },
    #[error("missing column {column:?} (available: {available})")]
    MissingColumn { column: String, available: String },
    #[error("columns {first:?} and {second:?} map to the same header")]
    DuplicateMapping { first: String, second: String },
    #[error("line {line}: declared depth {declared} but path has {actual} labels")]
    DepthMismatch { line: u64, declared: usize, actual: usize },
    #[error("line {line}: path has an empty level before a filled one")]
    PathGap { line: u64 },
    #[error("line {line}: OSM tags must sit at depth 2 or 3, found {depth}")]
    InvalidOsmDepth { line: u64, depth: usize },
    #[error("line {line}: duplicate category path {path} (first seen on line {first_line})")]
    DuplicatePath { line: u64, path: String, first_line: u64 },
    #[error("line {line}: column {column:?} holds {value:?}, expected a number")]
    InvalidNumber { line: u64, column: String, value: String },
    #[error("line {line}: {source}")]
    InvalidLabel {
        line: u64,
        #[source]
        source: TaxonomyError,
    },
    #[error("line {line}: OSM tag {tag:?} is not in the OSM taxonomy")]
    UnknownOsmTag { line: u64, tag: String },
    #[error("line {line}: OSM tag {tag:?} matches several OSM entries; add a key column or use full paths")]
    AmbiguousOsmTag { line: u64, tag: String },
    #[error("line {line}: FS path {path:?} is not in the FS taxonomy")]
    UnknownFsPath { line: u64, path: String },
}

impl IngestError {
    fn csv(source: csv::Error) -> Self {
        let line = source.position().map(|p| p.line()).unwrap_or(0);
        IngestError::Csv { line, source }
    }
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// A non-fatal finding attached to a line of an input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub line: u64,
    pub message: String,
}

/// Warnings gathered while loading one file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub file: String,
    pub warnings: Vec<Warning>,
}

impl ValidationReport {
    pub fn new(file: impl Into<String>) -> Self {
        Self { file: file.into(), warnings: Vec::new() }
    }

    pub fn warn(&mut self, line: u64, message: impl Into<String>) {
        self.warnings.push(Warning { line, message: message.into() });
    }

    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }

    /// One `file:line: message` string per warning.
    pub fn lines(&self) -> Vec<String> {
        self.warnings.iter().map(|w| format!("{}:{}: warning: {}", self.file, w.line, w.message)).collect()
    }
}

/// A loaded value together with the warnings produced while loading it.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub report: ValidationReport,
}

/// Where a category path lives in a CSV row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathColumns {
    /// One column per depth level, left to right.
    Levels(Vec<String>),
    /// A single column holding the rendered path.
    Joined { column: String, separator: String },
}

impl PathColumns {
    fn headers(&self) -> Vec<&str> {
        match self {
            PathColumns::Levels(cols) => cols.iter().map(String::as_str).collect(),
            PathColumns::Joined { column, .. } => vec![column.as_str()],
        }
    }
}

/// Column headers of the FS taxonomy file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsColumns {
    pub tag: Option<String>,
    pub depth: Option<String>,
    pub levels: Vec<String>,
    pub description: Option<String>,
}

impl Default for FsColumns {
    fn default() -> Self {
        Self {
            tag: Some("Tag".into()),
            depth: Some("Depth".into()),
            levels: (1..=MAX_DEPTH).map(|d| format!("Depth_{d}")).collect(),
            description: None,
        }
    }
}

/// Column headers of the OSM taxonomy file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OsmColumns {
    pub tag: Option<String>,
    pub depth: Option<String>,
    pub levels: Vec<String>,
    pub description: String,
    pub element: Option<String>,
}

impl Default for OsmColumns {
    fn default() -> Self {
        Self {
            tag: Some("Tag".into()),
            depth: Some("Depth".into()),
            levels: (1..=OSM_MAX_DEPTH).map(|d| format!("Depth_{d}")).collect(),
            description: "Description".into(),
            element: Some("Element".into()),
        }
    }
}

/// How rows of a separate description file are matched to FS categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionKey {
    /// Match on the leaf label; a repeated leaf receives the same description everywhere.
    Leaf(String),
    /// Match on the full path.
    Path(PathColumns),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptionColumns {
    pub key: DescriptionKey,
    pub description: String,
}

impl Default for DescriptionColumns {
    fn default() -> Self {
        Self { key: DescriptionKey::Leaf("Tag".into()), description: "Description".into() }
    }
}

/// Column headers of a prediction or candidate file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionColumns {
    /// OSM tag label or full OSM path.
    pub osm_tag: String,
    /// Optional OSM key column used to disambiguate repeated tag labels.
    pub osm_key: Option<String>,
    /// Used when the header has it; otherwise each row starts a new tag.
    pub rank: Option<String>,
    pub fs_path: PathColumns,
    /// Used when the header has it.
    pub score: Option<String>,
}

impl Default for PredictionColumns {
    fn default() -> Self {
        Self {
            osm_tag: "osm_tag".into(),
            osm_key: None,
            rank: Some("rank".into()),
            fs_path: PathColumns::Joined { column: "fs_path".into(), separator: PATH_SEPARATOR.into() },
            score: Some("score".into()),
        }
    }
}

fn header_key(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .chars()
        .map(|c| if c == '_' || c == '-' { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Header positions of one CSV file, looked up by normalized name.
pub(crate) struct Headers {
    index: HashMap<String, usize>,
    raw: Vec<String>,
}

impl Headers {
    pub(crate) fn new(record: &csv::StringRecord) -> Self {
        let raw: Vec<String> = record.iter().map(str::to_owned).collect();
        let mut index = HashMap::new();
        for (i, h) in raw.iter().enumerate() {
            index.entry(header_key(h)).or_insert(i);
        }
        Self { index, raw }
    }

    pub(crate) fn find(&self, name: &str) -> Option<usize> {
        self.index.get(&header_key(name)).copied()
    }

    pub(crate) fn require(&self, name: &str) -> Result<usize> {
        self.find(name)
            .ok_or_else(|| IngestError::MissingColumn { column: name.to_owned(), available: self.raw.join(", ") })
    }

    pub(crate) fn optional(&self, name: Option<&str>) -> Result<Option<usize>> {
        name.map(|n| self.require(n)).transpose()
    }
}

/// Fails when two logical fields name the same header.
pub(crate) fn check_distinct(names: &[&str]) -> Result<()> {
    let mut seen: HashMap<String, &str> = HashMap::new();
    for name in names {
        if let Some(first) = seen.insert(header_key(name), name) {
            return Err(IngestError::DuplicateMapping { first: first.to_owned(), second: (*name).to_owned() });
        }
    }
    Ok(())
}

/// Treats the usual spreadsheet placeholders as empty.
pub(crate) fn cell(record: &csv::StringRecord, idx: usize) -> Option<&str> {
    let value = record.get(idx)?.trim();
    match value {
        "" | "-" | "--" | "–" | "nan" | "NaN" | "None" | "null" => None,
        v => Some(v),
    }
}

pub(crate) fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub(crate) fn parse_count(record: &csv::StringRecord, idx: usize, column: &str) -> Result<Option<usize>> {
    let Some(raw) = cell(record, idx) else { return Ok(None) };
    let bad = || IngestError::InvalidNumber { line: line_of(record), column: column.to_owned(), value: raw.to_owned() };
    let value: f64 = raw.parse().map_err(|_| bad())?;
    if value < 0.0 || value.fract() != 0.0 {
        return Err(bad());
    }
    Ok(Some(value as usize))
}

pub(crate) fn parse_real(record: &csv::StringRecord, idx: usize, column: &str) -> Result<Option<f64>> {
    let Some(raw) = cell(record, idx) else { return Ok(None) };
    raw.parse().map(Some).map_err(|_| IngestError::InvalidNumber {
        line: line_of(record),
        column: column.to_owned(),
        value: raw.to_owned(),
    })
}

pub(crate) enum ResolvedPath {
    Levels(Vec<usize>),
    Joined { idx: usize, separator: String },
}

impl ResolvedPath {
    pub(crate) fn new(headers: &Headers, spec: &PathColumns) -> Result<Self> {
        Ok(match spec {
            PathColumns::Levels(cols) => {
                ResolvedPath::Levels(cols.iter().map(|c| headers.require(c)).collect::<Result<_>>()?)
            }
            PathColumns::Joined { column, separator } => {
                ResolvedPath::Joined { idx: headers.require(column)?, separator: separator.clone() }
            }
        })
    }

    /// Reads the path of `record`; `None` when every level is empty.
    pub(crate) fn read(&self, record: &csv::StringRecord) -> Result<Option<CategoryPath>> {
        let line = line_of(record);
        let invalid = |source| IngestError::InvalidLabel { line, source };
        match self {
            ResolvedPath::Levels(cols) => {
                let cells: Vec<Option<&str>> = cols.iter().map(|&i| cell(record, i)).collect();
                let filled = cells.iter().take_while(|c| c.is_some()).count();
                if cells[filled..].iter().any(Option::is_some) {
                    return Err(IngestError::PathGap { line });
                }
                if filled == 0 {
                    return Ok(None);
                }
                let raw: Vec<&str> = cells[..filled].iter().map(|c| c.unwrap()).collect();
                CategoryPath::from_raw(&raw).map(Some).map_err(invalid)
            }
            ResolvedPath::Joined { idx, separator } => match cell(record, *idx) {
                None => Ok(None),
                Some(text) => CategoryPath::parse_with(text, separator).map(Some).map_err(invalid),
            },
        }
    }
}

pub(crate) fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::None).from_reader(input)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })
}

fn read_header<R: Read>(reader: &mut csv::Reader<R>) -> Result<Headers> {
    Ok(Headers::new(reader.headers().map_err(IngestError::csv)?))
}

/// Reads the path levels of a taxonomy row and checks them against the declared depth.
fn taxonomy_path(
    record: &csv::StringRecord,
    levels: &ResolvedPath,
    depth_idx: Option<usize>,
    depth_col: &str,
) -> Result<CategoryPath> {
    let line = line_of(record);
    let path = levels.read(record)?;
    let actual = path.as_ref().map_or(0, CategoryPath::depth);
    if let Some(idx) = depth_idx {
        if let Some(declared) = parse_count(record, idx, depth_col)? {
            if declared != actual {
                return Err(IngestError::DepthMismatch { line, declared, actual });
            }
        }
    }
    path.ok_or(IngestError::DepthMismatch { line, declared: 0, actual: 0 })
}

fn check_tag(report: &mut ValidationReport, record: &csv::StringRecord, tag_idx: Option<usize>, leaf: &Label) {
    let Some(idx) = tag_idx else { return };
    let line = line_of(record);
    match cell(record, idx).map(normalize_label) {
        Some(Ok(tag)) if &tag == leaf => {}
        Some(Ok(tag)) => report.warn(line, format!("tag {tag:?} differs from path leaf {leaf:?}; using the path")),
        _ => report.warn(line, "empty tag cell; using the path leaf"),
    }
}

/// Loads the FS taxonomy from CSV text.
pub fn read_fs<R: Read>(input: R, columns: &FsColumns, name: &str) -> Result<Loaded<FsTaxonomy>> {
    let mut names: Vec<&str> = columns.levels.iter().map(String::as_str).collect();
    names.extend(columns.tag.as_deref());
    names.extend(columns.depth.as_deref());
    names.extend(columns.description.as_deref());
    check_distinct(&names)?;

    let mut reader = csv_reader(input);
    let headers = read_header(&mut reader)?;
    let levels = ResolvedPath::new(&headers, &PathColumns::Levels(columns.levels.clone()))?;
    let tag_idx = headers.optional(columns.tag.as_deref())?;
    let depth_idx = headers.optional(columns.depth.as_deref())?;
    let desc_idx = headers.optional(columns.description.as_deref())?;
    let depth_col = columns.depth.as_deref().unwrap_or("depth");

    let mut report = ValidationReport::new(name);
    let mut seen: HashMap<CategoryPath, u64> = HashMap::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(IngestError::csv)?;
        let line = line_of(&record);
        let path = taxonomy_path(&record, &levels, depth_idx, depth_col)?;
        if let Some(&first_line) = seen.get(&path) {
            return Err(IngestError::DuplicatePath { line, path: path.to_string(), first_line });
        }
        seen.insert(path.clone(), line);
        check_tag(&mut report, &record, tag_idx, path.leaf());
        let description = desc_idx.and_then(|i| cell(&record, i)).map(str::to_owned);
        entries.push(FsCategory::new(path, description));
    }
    Ok(Loaded { value: Taxonomy::new(entries), report })
}

/// Loads the OSM taxonomy from CSV text.
pub fn read_osm<R: Read>(input: R, columns: &OsmColumns, name: &str) -> Result<Loaded<OsmTaxonomy>> {
    let mut names: Vec<&str> = columns.levels.iter().map(String::as_str).collect();
    names.extend(columns.tag.as_deref());
    names.extend(columns.depth.as_deref());
    names.push(&columns.description);
    names.extend(columns.element.as_deref());
    check_distinct(&names)?;

    let mut reader = csv_reader(input);
    let headers = read_header(&mut reader)?;
    let levels = ResolvedPath::new(&headers, &PathColumns::Levels(columns.levels.clone()))?;
    let tag_idx = headers.optional(columns.tag.as_deref())?;
    let depth_idx = headers.optional(columns.depth.as_deref())?;
    let desc_idx = headers.require(&columns.description)?;
    let elem_idx = headers.optional(columns.element.as_deref())?;
    let depth_col = columns.depth.as_deref().unwrap_or("depth");

    let mut report = ValidationReport::new(name);
    let mut seen: HashMap<CategoryPath, u64> = HashMap::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(IngestError::csv)?;
        let line = line_of(&record);
        let path = taxonomy_path(&record, &levels, depth_idx, depth_col)?;
        if !(2..=OSM_MAX_DEPTH).contains(&path.depth()) {
            return Err(IngestError::InvalidOsmDepth { line, depth: path.depth() });
        }
        if let Some(first) = seen.insert(path.clone(), line) {
            report.warn(line, format!("OSM path {path} repeats line {first}"));
        }
        check_tag(&mut report, &record, tag_idx, path.leaf());
        let description = cell(&record, desc_idx).unwrap_or_default().to_owned();
        if description.is_empty() {
            report.warn(line, format!("empty description for {path}"));
        }
        let mut elements = BTreeSet::new();
        if let Some(raw) = elem_idx.and_then(|i| cell(&record, i)) {
            for part in raw.split(['/', ',']).map(str::trim).filter(|p| !p.is_empty()) {
                match part.parse::<ElementKind>() {
                    Ok(kind) => {
                        elements.insert(kind);
                    }
                    Err(msg) => report.warn(line, msg),
                }
            }
        }
        entries.push(OsmTag { path, description, elements });
    }
    Ok(Loaded { value: Taxonomy::new(entries), report })
}

pub fn load_fs(path: &Path, columns: &FsColumns) -> Result<Loaded<FsTaxonomy>> {
    read_fs(open(path)?, columns, &path.display().to_string())
}

pub fn load_osm(path: &Path, columns: &OsmColumns) -> Result<Loaded<OsmTaxonomy>> {
    read_osm(open(path)?, columns, &path.display().to_string())
}

/// Attaches descriptions from a separate file, returning a new taxonomy.
///
/// Every category that receives no description is listed in the report.
pub fn read_descriptions<R: Read>(
    fs: &FsTaxonomy,
    input: R,
    columns: &DescriptionColumns,
    name: &str,
) -> Result<Loaded<FsTaxonomy>> {
    let mut reader = csv_reader(input);
    let headers = read_header(&mut reader)?;
    let desc_idx = headers.require(&columns.description)?;
    enum Key {
        Leaf(usize),
        Path(ResolvedPath),
    }
    let key = match &columns.key {
        DescriptionKey::Leaf(col) => Key::Leaf(headers.require(col)?),
        DescriptionKey::Path(spec) => Key::Path(ResolvedPath::new(&headers, spec)?),
    };

    let mut report = ValidationReport::new(name);
    let mut by_leaf: HashMap<Label, String> = HashMap::new();
    let mut by_path: HashMap<CategoryPath, String> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(IngestError::csv)?;
        let line = line_of(&record);
        let Some(text) = cell(&record, desc_idx) else {
            report.warn(line, "empty description");
            continue;
        };
        match &key {
            Key::Leaf(idx) => match cell(&record, *idx).map(normalize_label) {
                Some(Ok(label)) => {
                    if by_leaf.insert(label.clone(), text.to_owned()).is_some() {
                        report.warn(line, format!("second description for {label}; keeping the last"));
                    }
                }
                _ => report.warn(line, "row without a key"),
            },
            Key::Path(spec) => match spec.read(&record)? {
                Some(path) => {
                    if fs.by_path(&path).is_empty() {
                        report.warn(line, format!("{path} is not an FS category"));
                    }
                    by_path.insert(path, text.to_owned());
                }
                None => report.warn(line, "row without a key"),
            },
        }
    }

    let entries = fs
        .entries()
        .iter()
        .map(|c| {
            let found = by_path.get(&c.path).or_else(|| by_leaf.get(c.leaf())).cloned();
            if found.is_none() {
                report.warn(0, format!("no description for {}", c.path));
            }
            FsCategory::new(c.path.clone(), found.or_else(|| c.description.clone()))
        })
        .collect();
    Ok(Loaded { value: Taxonomy::new(entries), report })
}

pub fn load_descriptions(fs: &FsTaxonomy, path: &Path, columns: &DescriptionColumns) -> Result<Loaded<FsTaxonomy>> {
    read_descriptions(fs, open(path)?, columns, &path.display().to_string())
}

/// Counts over a loaded taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub total_tags: usize,
    pub top_level_count: usize,
    pub per_depth: BTreeMap<usize, usize>,
}

pub fn summarize<E: Entry>(taxonomy: &Taxonomy<E>) -> SummaryStats {
    let mut per_depth = BTreeMap::new();
    for e in taxonomy.entries() {
        *per_depth.entry(e.path().depth()).or_insert(0) += 1;
    }
    SummaryStats { total_tags: taxonomy.len(), top_level_count: taxonomy.main_labels().len(), per_depth }
}

fn level_cells(path: &CategoryPath, width: usize) -> Vec<String> {
    (0..width).map(|i| path.labels().get(i).map(|l| l.to_string()).unwrap_or_default()).collect()
}

/// Writes the FS taxonomy with the given headers; `read_fs` reads it back unchanged.
pub fn write_fs<W: Write>(out: W, fs: &FsTaxonomy, columns: &FsColumns) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = Vec::new();
    header.extend(columns.tag.as_deref());
    header.extend(columns.depth.as_deref());
    header.extend(columns.levels.iter().map(String::as_str));
    header.extend(columns.description.as_deref());
    w.write_record(&header)?;
    for c in fs.entries() {
        let mut row = Vec::new();
        if columns.tag.is_some() {
            row.push(c.leaf().to_string());
        }
        if columns.depth.is_some() {
            row.push(c.path.depth().to_string());
        }
        row.extend(level_cells(&c.path, columns.levels.len()));
        if columns.description.is_some() {
            row.push(c.description.clone().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_osm<W: Write>(out: W, osm: &OsmTaxonomy, columns: &OsmColumns) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = Vec::new();
    header.extend(columns.tag.as_deref());
    header.extend(columns.depth.as_deref());
    header.extend(columns.levels.iter().map(String::as_str));
    header.push(&columns.description);
    header.extend(columns.element.as_deref());
    w.write_record(&header)?;
    for t in osm.entries() {
        let mut row = Vec::new();
        if columns.tag.is_some() {
            row.push(t.tag().to_string());
        }
        if columns.depth.is_some() {
            row.push(t.path.depth().to_string());
        }
        row.extend(level_cells(&t.path, columns.levels.len()));
        row.push(t.description.clone());
        if columns.element.is_some() {
            let kinds: Vec<&str> = t.elements.iter().map(|k| k.as_str()).collect();
            row.push(kinds.join(" / "));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Resolves OSM tag cells (bare labels or full paths) to taxonomy entries.
///
/// A bare label shared by several OSM entries (e.g. `tower` under `building`
/// and `man made`) is resolved by an explicit key column when one is mapped;
/// otherwise the n-th record group naming that label maps to the n-th entry
/// with that label in taxonomy order, which is how per-tag output files are
/// produced from the taxonomy table.
pub(crate) struct OsmResolver<'a> {
    osm: &'a OsmTaxonomy,
    occurrences: HashMap<Label, usize>,
}

impl<'a> OsmResolver<'a> {
    pub(crate) fn new(osm: &'a OsmTaxonomy) -> Self {
        Self { osm, occurrences: HashMap::new() }
    }

    /// `new_group` is true on the first row of a tag's block of rows.
    pub(crate) fn resolve(&mut self, line: u64, raw: &str, key: Option<&str>, new_group: bool) -> Result<OsmId> {
        let unknown = || IngestError::UnknownOsmTag { line, tag: raw.to_owned() };
        let ambiguous = || IngestError::AmbiguousOsmTag { line, tag: raw.to_owned() };
        if raw.contains(PATH_SEPARATOR.trim()) {
            let path: CategoryPath = raw.parse().map_err(|_| unknown())?;
            return match self.osm.by_path(&path) {
                [] => Err(unknown()),
                [id] => Ok(*id),
                _ => Err(ambiguous()),
            };
        }
        let label = normalize_label(raw).map_err(|_| unknown())?;
        let mut ids: Vec<OsmId> = self.osm.by_leaf(&label).to_vec();
        if let Some(key) = key {
            let key = normalize_label(key).map_err(|_| unknown())?;
            ids.retain(|id| self.osm.get(*id).key() == &key);
        }
        match ids.as_slice() {
            [] => Err(unknown()),
            [id] => Ok(*id),
            many => {
                let seen = self.occurrences.entry(label).or_insert(0);
                if new_group {
                    *seen += 1;
                }
                many.get(seen.saturating_sub(1)).copied().ok_or_else(ambiguous)
            }
        }
    }
}

/// Renders an OSM entry for prediction files: the full path, never the bare tag.
pub fn osm_key(tag: &OsmTag) -> String {
    tag.path.to_string()
}

/// One row of a prediction or candidate file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub osm: OsmId,
    pub rank: usize,
    pub predicted: CategoryPath,
    pub score: Option<f64>,
    pub line: u64,
}

/// All records of one prediction file, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    pub records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Best-ranked prediction per OSM tag.
    pub fn top1(&self) -> BTreeMap<OsmId, CategoryPath> {
        let mut best: BTreeMap<OsmId, &PredictionRecord> = BTreeMap::new();
        for r in &self.records {
            best.entry(r.osm)
                .and_modify(|cur| {
                    if r.rank < cur.rank {
                        *cur = r;
                    }
                })
                .or_insert(r);
        }
        best.into_iter().map(|(k, r)| (k, r.predicted.clone())).collect()
    }

    /// Records grouped per OSM tag and ordered by rank.
    pub fn by_tag(&self) -> BTreeMap<OsmId, Vec<&PredictionRecord>> {
        let mut groups: BTreeMap<OsmId, Vec<&PredictionRecord>> = BTreeMap::new();
        for r in &self.records {
            groups.entry(r.osm).or_default().push(r);
        }
        for rows in groups.values_mut() {
            rows.sort_by_key(|r| r.rank);
        }
        groups
    }

    /// Resolves predicted paths to FS entries, failing on paths outside the taxonomy.
    pub fn resolve_fs(&self, fs: &FsTaxonomy) -> Result<Vec<FsId>> {
        self.records
            .iter()
            .map(|r| {
                fs.by_path(&r.predicted)
                    .first()
                    .copied()
                    .ok_or_else(|| IngestError::UnknownFsPath { line: r.line, path: r.predicted.to_string() })
            })
            .collect()
    }
}

pub fn read_predictions<R: Read>(input: R, columns: &PredictionColumns, osm: &OsmTaxonomy) -> Result<PredictionSet> {
    let mut names = vec![columns.osm_tag.as_str()];
    names.extend(columns.osm_key.as_deref());
    names.extend(columns.rank.as_deref());
    names.extend(columns.fs_path.headers());
    names.extend(columns.score.as_deref());
    check_distinct(&names)?;

    let mut reader = csv_reader(input);
    let headers = read_header(&mut reader)?;
    let tag_idx = headers.require(&columns.osm_tag)?;
    let key_idx = headers.optional(columns.osm_key.as_deref())?;
    // A top-1 file may lack rank and score entirely.
    let rank_idx = columns.rank.as_deref().and_then(|n| headers.find(n));
    let score_idx = columns.score.as_deref().and_then(|n| headers.find(n));
    let path = ResolvedPath::new(&headers, &columns.fs_path)?;

    let mut resolver = OsmResolver::new(osm);
    let mut records = Vec::new();
    let mut previous_tag: Option<String> = None;
    for record in reader.records() {
        let record = record.map_err(IngestError::csv)?;
        let line = line_of(&record);
        let raw_tag = cell(&record, tag_idx).unwrap_or_default().to_owned();
        let rank = match rank_idx {
            Some(i) => parse_count(&record, i, "rank")?.unwrap_or(1),
            None => 1,
        };
        let new_group = rank_idx.is_none() || rank <= 1 || previous_tag.as_deref() != Some(raw_tag.as_str());
        let key = key_idx.and_then(|i| cell(&record, i));
        let osm_id = resolver.resolve(line, &raw_tag, key, new_group)?;
        let predicted = path.read(&record)?.ok_or_else(|| IngestError::UnknownFsPath { line, path: String::new() })?;
        let score = match score_idx {
            Some(i) => parse_real(&record, i, "score")?,
            None => None,
        };
        records.push(PredictionRecord { osm: osm_id, rank, predicted, score, line });
        previous_tag = Some(raw_tag);
    }
    Ok(PredictionSet { records })
}

pub fn load_predictions(path: &Path, columns: &PredictionColumns, osm: &OsmTaxonomy) -> Result<PredictionSet> {
    read_predictions(open(path)?, columns, osm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::EntryId;

    const FS_CSV: &str = "\
Tag,Depth,Depth_1,Depth_2,Depth_3,Depth_4,Depth_5,Depth_6
dining and drinking,1,Dining and Drinking,,,,,
restaurant,2,Dining and Drinking,Restaurant,,,,
asian restaurant,3,Dining and Drinking,Restaurant,Asian restaurant,,,
japanese restaurant,4,Dining and Drinking,Restaurant,Asian restaurant,Japanese restaurant,,
kaiseki restaurant,5,Dining and Drinking,Restaurant,Asian restaurant,Japanese restaurant,Kaiseki restaurant,--
shabu-shabu restaurant,5,Dining and Drinking,Restaurant,Asian restaurant,Japanese restaurant,Shabu-shabu restaurant,
landmarks and outdoors,1,Landmarks and Outdoors,,,,,
lake,2,Landmarks and Outdoors,Lake,,,,
stable,2,Landmarks and Outdoors,Stable,,,,
health and medicine,1,Health and Medicine,,,,,
hospice,2,Health and Medicine,Hospice,,,,
";

    const OSM_CSV: &str = "\
Tag,Depth,Depth_1,Depth_2,Depth_3,Description,Element
cable car,2,aerialway,cable car,,\"A cable car run; one or two large cars that shuttle along a line.\",way
gondola,2,aerialway,gondola,,An aerialway where enclosed cabins circulate continuously.,way
lock gate,3,waterway,barriers on waterways,lock gate,A gate forming part of a navigation lock.,node / way
fuel,3,waterway,other features on waterways,fuel,Facility providing fuel for boats.,node / area
tower,2,building,tower,,A tower building.,node / area
tower,2,man_made,tower,,A tall structure.,node
";

    fn fs() -> FsTaxonomy {
        read_fs(FS_CSV.as_bytes(), &FsColumns::default(), "fs.csv").unwrap().value
    }

    fn osm() -> OsmTaxonomy {
        read_osm(OSM_CSV.as_bytes(), &OsmColumns::default(), "osm.csv").unwrap().value
    }

    #[test]
    fn fs_loads_and_summarizes() {
        let loaded = read_fs(FS_CSV.as_bytes(), &FsColumns::default(), "fs.csv").unwrap();
        assert!(loaded.report.is_clean(), "{:?}", loaded.report);
        let stats = summarize(&loaded.value);
        assert_eq!(stats.total_tags, 11);
        assert_eq!(stats.top_level_count, 3);
        assert_eq!(stats.per_depth, BTreeMap::from([(1, 3), (2, 4), (3, 1), (4, 1), (5, 2)]));
        let shabu = normalize_label("shabu-shabu restaurant").unwrap();
        assert_eq!(loaded.value.by_leaf(&shabu).len(), 1);
    }

    #[test]
    fn depth_mismatch_is_an_error() {
        let csv = "Tag,Depth,Depth_1,Depth_2,Depth_3,Depth_4,Depth_5,Depth_6\nlake,3,Landmarks and Outdoors,Lake,,,,\n";
        let err = read_fs(csv.as_bytes(), &FsColumns::default(), "x").unwrap_err();
        assert!(matches!(err, IngestError::DepthMismatch { line: 2, declared: 3, actual: 2 }), "{err}");
    }

    #[test]
    fn gaps_and_duplicates_are_errors() {
        let gap = "Depth_1,Depth_2,Depth_3,Depth_4,Depth_5,Depth_6\na,,c,,,\n";
        let cols = FsColumns { tag: None, depth: None, ..FsColumns::default() };
        assert!(matches!(read_fs(gap.as_bytes(), &cols, "x"), Err(IngestError::PathGap { .. })));
        let dup = "Depth_1,Depth_2,Depth_3,Depth_4,Depth_5,Depth_6\nRetail,,,,,\nretail,,,,,\n";
        let err = read_fs(dup.as_bytes(), &cols, "x").unwrap_err();
        assert!(matches!(err, IngestError::DuplicatePath { line: 3, first_line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_column_names_the_column() {
        let err = read_fs("Tag,Depth\n".as_bytes(), &FsColumns::default(), "x").unwrap_err();
        match err {
            IngestError::MissingColumn { column, .. } => assert_eq!(column, "Depth_1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn headers_match_loosely() {
        let csv = "tag,depth,Depth 1,depth-2,DEPTH_3,Depth 4,Depth 5,Depth 6\nlake,2,Landmarks and Outdoors,Lake,,,,\n";
        let tax = read_fs(csv.as_bytes(), &FsColumns::default(), "x").unwrap().value;
        assert_eq!(tax.len(), 1);
    }

    #[test]
    fn duplicate_mapping_rejected() {
        let cols = FsColumns { tag: Some("depth_1".into()), ..FsColumns::default() };
        assert!(matches!(read_fs(FS_CSV.as_bytes(), &cols, "x"), Err(IngestError::DuplicateMapping { .. })));
    }

    #[test]
    fn osm_loads_elements_and_paths() {
        let loaded = read_osm(OSM_CSV.as_bytes(), &OsmColumns::default(), "osm.csv").unwrap();
        let tax = loaded.value;
        let stats = summarize(&tax);
        assert_eq!(stats.per_depth.get(&1), None);
        assert_eq!(stats.per_depth, BTreeMap::from([(2, 4), (3, 2)]));
        let lock = &tax.entries()[2];
        assert_eq!(lock.path, CategoryPath::from_raw(&["waterway", "barriers on waterways", "lock gate"]).unwrap());
        assert_eq!(lock.elements, BTreeSet::from([ElementKind::Node, ElementKind::Way]));
        assert_eq!(tax.entries()[5].key().as_str(), "man made");
    }

    #[test]
    fn osm_depth_one_rejected_and_empty_description_warns() {
        let cols = OsmColumns::default();
        let d1 = "Tag,Depth,Depth_1,Depth_2,Depth_3,Description,Element\namenity,1,amenity,,,x,node\n";
        assert!(matches!(read_osm(d1.as_bytes(), &cols, "x"), Err(IngestError::InvalidOsmDepth { depth: 1, .. })));
        let empty = "Tag,Depth,Depth_1,Depth_2,Depth_3,Description,Element\nbench,2,amenity,bench,,,node\n";
        let loaded = read_osm(empty.as_bytes(), &cols, "x").unwrap();
        assert_eq!(loaded.report.warnings.len(), 1);
        assert_eq!(loaded.report.lines()[0], "x:2: warning: empty description for amenity > bench");
    }

    #[test]
    fn empty_taxonomy_summary() {
        let tax: FsTaxonomy = Taxonomy::new(vec![]);
        let stats = summarize(&tax);
        assert_eq!(stats.total_tags, 0);
        assert!(stats.per_depth.is_empty());
    }

    #[test]
    fn descriptions_by_leaf_and_report_missing() {
        let desc = "Tag,Description\nStable,A facility where horses are kept.\nlake,A large body of water.\n";
        let loaded = read_descriptions(&fs(), desc.as_bytes(), &DescriptionColumns::default(), "d.csv").unwrap();
        let stable = normalize_label("stable").unwrap();
        let id = loaded.value.by_leaf(&stable)[0];
        assert_eq!(loaded.value.get(id).description.as_deref(), Some("A facility where horses are kept."));
        // 11 categories, 2 described.
        assert_eq!(loaded.report.warnings.len(), 9);
    }

    #[test]
    fn descriptions_by_path() {
        let desc = "Path,Text\nLandmarks and Outdoors > Lake,Water.\n";
        let cols = DescriptionColumns {
            key: DescriptionKey::Path(PathColumns::Joined { column: "Path".into(), separator: ">".into() }),
            description: "Text".into(),
        };
        let loaded = read_descriptions(&fs(), desc.as_bytes(), &cols, "d.csv").unwrap();
        let lake = normalize_label("lake").unwrap();
        assert_eq!(loaded.value.get(loaded.value.by_leaf(&lake)[0]).description.as_deref(), Some("Water."));
    }

    #[test]
    fn fs_round_trip_through_writer() {
        let original = fs();
        let cols = FsColumns { description: Some("Description".into()), ..FsColumns::default() };
        let mut buf = Vec::new();
        write_fs(&mut buf, &original, &cols).unwrap();
        let back = read_fs(buf.as_slice(), &cols, "rt").unwrap().value;
        assert_eq!(back.entries(), original.entries());
    }

    #[test]
    fn osm_round_trip_through_writer() {
        let original = osm();
        let mut buf = Vec::new();
        write_osm(&mut buf, &original, &OsmColumns::default()).unwrap();
        let back = read_osm(buf.as_slice(), &OsmColumns::default(), "rt").unwrap().value;
        assert_eq!(back.entries(), original.entries());
    }

    #[test]
    fn predictions_resolve_tags() {
        let osm = osm();
        let csv = "\
osm_tag,rank,fs_path,score
cable car,1,landmarks and outdoors > lake,0.5
tower,1,landmarks and outdoors,0.4
tower,2,health and medicine,0.3
tower,1,health and medicine > hospice,0.2
building > tower,1,retail,0.1
";
        let set = read_predictions(csv.as_bytes(), &PredictionColumns::default(), &osm).unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.records[0].osm, EntryId(0));
        assert_eq!(set.records[1].osm, EntryId(4));
        assert_eq!(set.records[2].osm, EntryId(4));
        assert_eq!(set.records[3].osm, EntryId(5));
        assert_eq!(set.records[4].osm, EntryId(4));
        let top = set.top1();
        assert_eq!(top.len(), 3);
        assert_eq!(set.by_tag()[&EntryId(4)].len(), 3);
    }

    #[test]
    fn predictions_errors() {
        let osm = osm();
        let empty =
            read_predictions("osm_tag,rank,fs_path,score\n".as_bytes(), &PredictionColumns::default(), &osm).unwrap();
        assert!(empty.is_empty());
        let unknown = "osm_tag,rank,fs_path,score\nzzz,1,retail,0.1\n";
        let err = read_predictions(unknown.as_bytes(), &PredictionColumns::default(), &osm).unwrap_err();
        assert!(matches!(err, IngestError::UnknownOsmTag { line: 2, .. }), "{err}");
        let third = "osm_tag,rank,fs_path,score\ntower,1,retail,0.1\ntower,1,retail,0.1\ntower,1,retail,0.1\n";
        let err = read_predictions(third.as_bytes(), &PredictionColumns::default(), &osm).unwrap_err();
        assert!(matches!(err, IngestError::AmbiguousOsmTag { line: 4, .. }), "{err}");
    }

    #[test]
    fn predictions_with_key_column() {
        let osm = osm();
        let cols =
            PredictionColumns { osm_key: Some("key".into()), rank: None, score: None, ..PredictionColumns::default() };
        let csv = "osm_tag,key,fs_path\ntower,man_made,retail\n";
        let set = read_predictions(csv.as_bytes(), &cols, &osm).unwrap();
        assert_eq!(set.records[0].osm, EntryId(5));
        assert_eq!(set.records[0].score, None);
    }
}
