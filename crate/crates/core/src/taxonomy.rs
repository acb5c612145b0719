//! Normalized labels and hierarchical category paths shared by both taxonomies.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Deepest level of the Foursquare hierarchy.
pub const MAX_DEPTH: usize = 6;

/// Separator used when a path is rendered as a single string.
pub const PATH_SEPARATOR: &str = " > ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("category path must have between 1 and {MAX_DEPTH} labels, got {0}")]
    InvalidDepth(usize),
}

/// A category label: lowercase, single-spaced, without underscores.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(String);

/// Lowercases, turns underscores into spaces and collapses whitespace.
///
/// Other punctuation (hyphens, ampersands, slashes) is kept as-is.
pub fn normalize_label(raw: &str) -> Result<Label, TaxonomyError> {
    let lowered = raw.to_lowercase().replace('_', " ");
    let text = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    if text.is_empty() {
        return Err(TaxonomyError::EmptyLabel);
    }
    Ok(Label(text))
}

impl Label {
    pub fn new(raw: &str) -> Result<Self, TaxonomyError> {
        normalize_label(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Comparison key that ignores connective words ("and", "&").
    ///
    /// The cleaned taxonomies spell main categories both as
    /// "landmarks and outdoors" and "landmarks outdoors".
    pub fn loose_key(&self) -> String {
        self.0.split(' ').filter(|w| *w != "and" && *w != "&").collect::<Vec<_>>().join(" ")
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Label {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_label(s)
    }
}

impl AsRef<str> for Label {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        normalize_label(&raw).map_err(serde::de::Error::custom)
    }
}

/// Ordered list of labels from a root category down to a node, depth 1..=6.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CategoryPath(Vec<Label>);

impl CategoryPath {
    pub fn new(labels: Vec<Label>) -> Result<Self, TaxonomyError> {
        if labels.is_empty() || labels.len() > MAX_DEPTH {
            return Err(TaxonomyError::InvalidDepth(labels.len()));
        }
        Ok(Self(labels))
    }

    /// Normalizes every element before building the path.
    pub fn from_raw<S: AsRef<str>>(raw: &[S]) -> Result<Self, TaxonomyError> {
        let labels = raw.iter().map(|s| normalize_label(s.as_ref())).collect::<Result<Vec<_>, _>>()?;
        Self::new(labels)
    }

    /// Parses a path rendered with `separator`, trimming each element.
    pub fn parse_with(text: &str, separator: &str) -> Result<Self, TaxonomyError> {
        let sep = separator.trim();
        let parts: Vec<&str> = if sep.is_empty() { vec![text] } else { text.split(sep).collect() };
        Self::from_raw(&parts)
    }

    pub fn root(label: Label) -> Self {
        Self(vec![label])
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub fn leaf(&self) -> &Label {
        self.0.last().expect("paths are never empty")
    }

    pub fn main(&self) -> &Label {
        &self.0[0]
    }

    /// First `min(depth, self.depth())` labels. A `depth` of zero is treated as one.
    pub fn truncate(&self, depth: usize) -> CategoryPath {
        let keep = depth.max(1).min(self.0.len());
        CategoryPath(self.0[..keep].to_vec())
    }

    /// True when `self` is a (non-strict) prefix of `other`.
    pub fn is_prefix_of(&self, other: &CategoryPath) -> bool {
        self.depth() <= other.depth() && other.0[..self.depth()] == self.0[..]
    }

    /// Compares the first `depth` labels of both paths.
    pub fn agrees_to(&self, other: &CategoryPath, depth: usize) -> bool {
        self.truncate(depth) == other.truncate(depth)
    }

    /// Appends a label, failing when the path is already at maximum depth.
    pub fn child(&self, label: Label) -> Result<CategoryPath, TaxonomyError> {
        let mut labels = self.0.clone();
        labels.push(label);
        CategoryPath::new(labels)
    }

    /// Every prefix of this path, shortest first.
    pub fn prefixes(&self) -> impl Iterator<Item = CategoryPath> + '_ {
        (1..=self.depth()).map(move |d| self.truncate(d))
    }
}

/// Returns the first `depth` labels of `path`.
pub fn truncate(path: &CategoryPath, depth: usize) -> CategoryPath {
    path.truncate(depth)
}

pub fn is_prefix(a: &CategoryPath, b: &CategoryPath) -> bool {
    a.is_prefix_of(b)
}

impl fmt::Display for CategoryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, label) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(PATH_SEPARATOR)?;
            }
            f.write_str(label.as_str())?;
        }
        Ok(())
    }
}

impl FromStr for CategoryPath {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_with(s, PATH_SEPARATOR)
    }
}

impl Serialize for CategoryPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CategoryPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// A node of the Foursquare taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsCategory {
    pub path: CategoryPath,
    pub description: Option<String>,
}

impl FsCategory {
    pub fn new(path: CategoryPath, description: Option<String>) -> Self {
        Self { path, description }
    }

    pub fn leaf(&self) -> &Label {
        self.path.leaf()
    }
}

/// Geometry an OSM tag may be drawn on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Node,
    Way,
    Area,
    Relation,
}

impl ElementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Node => "node",
            ElementKind::Way => "way",
            ElementKind::Area => "area",
            ElementKind::Relation => "relation",
        }
    }
}

impl FromStr for ElementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "node" => Ok(ElementKind::Node),
            "way" => Ok(ElementKind::Way),
            "area" => Ok(ElementKind::Area),
            "relation" => Ok(ElementKind::Relation),
            other => Err(format!("unknown element kind {other:?}")),
        }
    }
}

/// An OSM key/value tag placed under its key (and optional subcategory).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OsmTag {
    pub path: CategoryPath,
    pub description: String,
    pub elements: BTreeSet<ElementKind>,
}

impl OsmTag {
    pub fn tag(&self) -> &Label {
        self.path.leaf()
    }

    /// The OSM key, e.g. `amenity`.
    pub fn key(&self) -> &Label {
        self.path.main()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaxonomyKind {
    Osm,
    Fs,
}

/// Common view over taxonomy entries.
pub trait Entry {
    const KIND: TaxonomyKind;
    fn path(&self) -> &CategoryPath;
}

impl Entry for FsCategory {
    const KIND: TaxonomyKind = TaxonomyKind::Fs;
    fn path(&self) -> &CategoryPath {
        &self.path
    }
}

impl Entry for OsmTag {
    const KIND: TaxonomyKind = TaxonomyKind::Osm;
    fn path(&self) -> &CategoryPath {
        &self.path
    }
}

/// Position of an entry inside its taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryId(pub usize);

pub type OsmId = EntryId;
pub type FsId = EntryId;

/// An immutable, indexed list of taxonomy entries in load order.
#[derive(Debug, Clone)]
pub struct Taxonomy<E> {
    entries: Vec<E>,
    by_leaf: HashMap<Label, Vec<EntryId>>,
    by_path: HashMap<CategoryPath, Vec<EntryId>>,
    nodes: HashSet<CategoryPath>,
    loose_nodes: HashMap<Vec<String>, CategoryPath>,
}

pub type FsTaxonomy = Taxonomy<FsCategory>;
pub type OsmTaxonomy = Taxonomy<OsmTag>;

impl<E: Entry> Taxonomy<E> {
    pub fn new(entries: Vec<E>) -> Self {
        let mut by_leaf: HashMap<Label, Vec<EntryId>> = HashMap::new();
        let mut by_path: HashMap<CategoryPath, Vec<EntryId>> = HashMap::new();
        let mut nodes = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            by_leaf.entry(e.path().leaf().clone()).or_default().push(EntryId(i));
            by_path.entry(e.path().clone()).or_default().push(EntryId(i));
            nodes.extend(e.path().prefixes());
        }
        let mut loose_nodes = HashMap::new();
        for node in &nodes {
            loose_nodes.entry(loose_path_key(node)).or_insert_with(|| node.clone());
        }
        Self { entries, by_leaf, by_path, nodes, loose_nodes }
    }

    pub fn kind(&self) -> TaxonomyKind {
        E::KIND
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[E] {
        &self.entries
    }

    pub fn get(&self, id: EntryId) -> &E {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntryId, &E)> {
        self.entries.iter().enumerate().map(|(i, e)| (EntryId(i), e))
    }

    pub fn by_leaf(&self, leaf: &Label) -> &[EntryId] {
        self.by_leaf.get(leaf).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn by_path(&self, path: &CategoryPath) -> &[EntryId] {
        self.by_path.get(path).map(Vec::as_slice).unwrap_or(&[])
    }

    /// True when `path` is the path of an entry or a prefix of one.
    pub fn contains_node(&self, path: &CategoryPath) -> bool {
        self.nodes.contains(path)
    }

    /// Finds the node spelled like `path` up to connective words.
    pub fn resolve_loose(&self, path: &CategoryPath) -> Option<&CategoryPath> {
        self.loose_nodes.get(&loose_path_key(path))
    }

    /// Distinct depth-1 labels, sorted.
    pub fn main_labels(&self) -> BTreeSet<Label> {
        self.entries.iter().map(|e| e.path().main().clone()).collect()
    }
}

fn loose_path_key(path: &CategoryPath) -> Vec<String> {
    path.labels().iter().map(Label::loose_key).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(raw: &[&str]) -> CategoryPath {
        CategoryPath::from_raw(raw).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_label("Kaiseki_Restaurant ").unwrap().as_str(), "kaiseki restaurant");
        assert_eq!(normalize_label("cable car").unwrap().as_str(), "cable car");
        assert_eq!(normalize_label(""), Err(TaxonomyError::EmptyLabel));
        assert_eq!(normalize_label(" _ \t"), Err(TaxonomyError::EmptyLabel));
    }

    #[test]
    fn normalize_keeps_punctuation() {
        assert_eq!(normalize_label("Shabu-shabu  Restaurant").unwrap().as_str(), "shabu-shabu restaurant");
        assert_eq!(normalize_label("Arts & Crafts/Store").unwrap().as_str(), "arts & crafts/store");
    }

    #[test]
    fn truncate_examples() {
        let kaiseki = path(&["dining and drinking", "restaurant", "asian restaurant"]);
        assert_eq!(truncate(&kaiseki, 2), path(&["dining and drinking", "restaurant"]));
        assert_eq!(truncate(&kaiseki, 3), kaiseki);
        assert_eq!(truncate(&kaiseki, 9), kaiseki);
        let lake = path(&["landmarks and outdoors", "lake"]);
        assert_eq!(truncate(&lake, 1), path(&["landmarks and outdoors"]));
    }

    #[test]
    fn prefix_examples() {
        let parent = path(&["landmarks and outdoors"]);
        let hill = path(&["landmarks and outdoors", "hill"]);
        assert!(is_prefix(&parent, &hill));
        assert!(!is_prefix(&hill, &parent));
        assert!(is_prefix(&hill, &hill));
        assert!(!is_prefix(&path(&["retail"]), &path(&["dining and drinking"])));
    }

    #[test]
    fn depth_bounds() {
        assert_eq!(CategoryPath::new(vec![]), Err(TaxonomyError::InvalidDepth(0)));
        let seven: Vec<&str> = vec!["a"; 7];
        assert_eq!(CategoryPath::from_raw(&seven), Err(TaxonomyError::InvalidDepth(7)));
        let six = CategoryPath::from_raw(&["a"; 6]).unwrap();
        assert!(six.child(normalize_label("b").unwrap()).is_err());
    }

    #[test]
    fn display_and_parse() {
        let p: CategoryPath = " Dining and Drinking >Restaurant > Asian_Restaurant".parse().unwrap();
        assert_eq!(p.to_string(), "dining and drinking > restaurant > asian restaurant");
        assert!("a >  > b".parse::<CategoryPath>().is_err());
    }

    #[test]
    fn loose_key_drops_connectives() {
        let a = normalize_label("Landmarks and Outdoors").unwrap();
        let b = normalize_label("landmarks outdoors").unwrap();
        assert_eq!(a.loose_key(), b.loose_key());
    }

    #[test]
    fn taxonomy_index_allows_repeated_leaves() {
        let tax = Taxonomy::new(vec![
            FsCategory::new(path(&["retail"]), None),
            FsCategory::new(path(&["retail", "kiosk"]), None),
            FsCategory::new(path(&["travel and transportation", "kiosk"]), None),
        ]);
        let kiosk = normalize_label("kiosk").unwrap();
        assert_eq!(tax.by_leaf(&kiosk).len(), 2);
        assert_eq!(tax.kind(), TaxonomyKind::Fs);
        assert!(tax.contains_node(&path(&["travel and transportation"])));
        assert!(!tax.contains_node(&path(&["nightlife spot"])));
        assert_eq!(tax.main_labels().len(), 2);
        let loose = path(&["travel transportation", "kiosk"]);
        assert_eq!(tax.resolve_loose(&loose), Some(&path(&["travel and transportation", "kiosk"])));
    }

    fn arb_label() -> impl Strategy<Value = String> {
        "[A-Za-z_ -]{0,12}"
    }

    fn arb_path() -> impl Strategy<Value = CategoryPath> {
        prop::collection::vec("[a-z]{1,6}( [a-z]{1,6})?", 1..=MAX_DEPTH)
            .prop_map(|v| CategoryPath::from_raw(&v).unwrap())
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in arb_label()) {
            if let Ok(once) = normalize_label(&raw) {
                let twice = normalize_label(once.as_str()).unwrap();
                prop_assert_eq!(&once, &twice);
                let s = once.as_str();
                prop_assert!(!s.contains('_'));
                prop_assert!(!s.contains("  "));
                prop_assert_eq!(s.trim(), s);
            }
        }

        #[test]
        fn truncate_composes(p in arb_path(), d1 in 1usize..8, d2 in 1usize..8) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert_eq!(truncate(&truncate(&p, hi), lo), truncate(&p, lo));
            prop_assert_eq!(truncate(&p, lo).depth(), lo.min(p.depth()));
        }

        #[test]
        fn truncation_is_prefix(p in arb_path(), d in 1usize..8) {
            prop_assert!(is_prefix(&truncate(&p, d), &p));
        }

        #[test]
        fn display_parse_round_trip(p in arb_path()) {
            let back: CategoryPath = p.to_string().parse().unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
