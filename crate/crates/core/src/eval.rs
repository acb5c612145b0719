//! Scoring predictions and candidate lists against the oracle.
//!
//! A prediction is correct at depth `d` when it agrees with the oracle path
//! on the first `min(d, depth(oracle))` labels. An oracle stopping at a main
//! category therefore accepts any prediction under that main category.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::OracleSet;
use crate::embedding::CandidateList;
use crate::taxonomy::{CategoryPath, Label, OsmId, OsmTaxonomy, MAX_DEPTH};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("ROC needs at least one positive and one negative pair ({positives} positive, {negatives} negative)")]
    DegenerateLabels { positives: usize, negatives: usize },
}

pub fn depth_correct(pred: &CategoryPath, oracle: &CategoryPath, d: usize) -> bool {
    let m = d.min(oracle.depth());
    pred.truncate(m) == oracle.truncate(m)
}

/// `100 * num / den` rounded half-up to two decimals, using exact integer arithmetic.
pub fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        return 0.0;
    }
    let (num, den) = (num as u128, den as u128);
    let hundredths = (num * 20_000 + den) / (2 * den);
    hundredths as f64 / 100.0
}

/// Correct counts at each depth 1..=6 over the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub n: usize,
    pub correct: [usize; MAX_DEPTH],
    /// Oracle tags without a prediction, counted as wrong.
    pub missing: usize,
}

impl DepthProfile {
    /// Rounded percentage at depth `d` (1-based).
    pub fn pct(&self, d: usize) -> f64 {
        percent(self.correct[d - 1], self.n)
    }

    pub fn pcts(&self) -> [f64; MAX_DEPTH] {
        std::array::from_fn(|i| self.pct(i + 1))
    }
}

/// Depth profile of one prediction per tag.
pub fn top1_profile(preds: &BTreeMap<OsmId, CategoryPath>, oracle: &OracleSet) -> DepthProfile {
    let mut p = DepthProfile { n: oracle.len(), correct: [0; MAX_DEPTH], missing: 0 };
    for entry in oracle.iter() {
        match preds.get(&entry.osm) {
            Some(pred) => {
                for d in 1..=MAX_DEPTH {
                    p.correct[d - 1] += usize::from(depth_correct(pred, &entry.fs_path, d));
                }
            }
            None => p.missing += 1,
        }
    }
    p
}

pub fn top1_accuracy(preds: &BTreeMap<OsmId, CategoryPath>, oracle: &OracleSet, d: usize) -> f64 {
    top1_profile(preds, oracle).pct(d)
}

/// Top-ranked path per tag.
pub fn top1_of(cands: &BTreeMap<OsmId, CandidateList>) -> BTreeMap<OsmId, CategoryPath> {
    cands.iter().filter_map(|(id, l)| l.top1().map(|c| (*id, c.path.clone()))).collect()
}

/// Tags whose first `k` candidates include one reaching the full oracle path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallCount {
    pub k: usize,
    pub hits: usize,
    pub n: usize,
    /// Tags whose list is shorter than `k`.
    pub short_lists: usize,
}

impl RecallCount {
    pub fn pct(&self) -> f64 {
        percent(self.hits, self.n)
    }
}

pub fn topk_recall_count(cands: &BTreeMap<OsmId, CandidateList>, oracle: &OracleSet, k: usize) -> RecallCount {
    let mut r = RecallCount { k, hits: 0, n: oracle.len(), short_lists: 0 };
    for entry in oracle.iter() {
        let Some(list) = cands.get(&entry.osm) else { continue };
        if list.len() < k {
            r.short_lists += 1;
        }
        let hit = list.candidates.iter().take(k).any(|c| depth_correct(&c.path, &entry.fs_path, entry.fs_path.depth()));
        r.hits += usize::from(hit);
    }
    r
}

pub fn topk_recall(cands: &BTreeMap<OsmId, CandidateList>, oracle: &OracleSet, k: usize) -> f64 {
    topk_recall_count(cands, oracle, k).pct()
}

/// Which (tag, candidate) pairs count as positive for ROC.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RocPositive {
    /// The candidate reaches the full oracle path.
    #[default]
    OracleDepth,
    /// The candidate path equals the oracle path.
    ExactPath,
}

impl std::str::FromStr for RocPositive {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('-', "_").as_str() {
            "oracle_depth" | "prefix" => Ok(RocPositive::OracleDepth),
            "exact_path" | "exact" => Ok(RocPositive::ExactPath),
            other => Err(format!("unknown ROC positive rule {other:?}")),
        }
    }
}

fn is_positive(candidate: &CategoryPath, oracle: &CategoryPath, rule: RocPositive) -> bool {
    match rule {
        RocPositive::OracleDepth => depth_correct(candidate, oracle, oracle.depth()),
        RocPositive::ExactPath => candidate == oracle,
    }
}

/// `(score, positive)` for every candidate of every oracle tag.
///
/// With full-corpus lists this covers all tag and FS category combinations.
pub fn roc_pairs(cands: &BTreeMap<OsmId, CandidateList>, oracle: &OracleSet, rule: RocPositive) -> Vec<(f64, bool)> {
    oracle
        .iter()
        .filter_map(|e| cands.get(&e.osm).map(|l| (e, l)))
        .flat_map(|(e, l)| l.candidates.iter().map(move |c| (c.score, is_positive(&c.path, &e.fs_path, rule))))
        .collect()
}

fn class_counts(pairs: &[(f64, bool)]) -> Result<(usize, usize), EvalError> {
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateLabels { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Probability that a random positive outscores a random negative, ties counting one half.
///
/// Rank-sum form: sort once, give tied scores their average rank.
pub fn roc_auc(pairs: &[(f64, bool)]) -> Result<f64, EvalError> {
    let (pos, neg) = class_counts(pairs)?;
    let mut sorted: Vec<&(f64, bool)> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the positive rank sum, kept integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the average (i + 1 + j) / 2.
        let tied_pos = sorted[i..j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += tied_pos * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// ROC staircase from (0,0) to (1,1); tied scores move diagonally.
pub fn roc_curve(pairs: &[(f64, bool)]) -> Result<Vec<(f64, f64)>, EvalError> {
    let (pos, neg) = class_counts(pairs)?;
    let mut sorted: Vec<&(f64, bool)> = pairs.iter().collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(points)
}

/// Trapezoidal area under a curve given as ordered points.
pub fn curve_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Mean of per-tag AUCs over tags that have both positive and negative candidates.
pub fn per_tag_auc(cands: &BTreeMap<OsmId, CandidateList>, oracle: &OracleSet, rule: RocPositive) -> Option<f64> {
    let aucs: Vec<f64> = oracle
        .iter()
        .filter_map(|e| {
            let l = cands.get(&e.osm)?;
            let pairs: Vec<(f64, bool)> =
                l.candidates.iter().map(|c| (c.score, is_positive(&c.path, &e.fs_path, rule))).collect();
            roc_auc(&pairs).ok()
        })
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// The OSM key, e.g. `amenity`.
    OsmKey,
    /// The main category of the oracle path.
    FsMain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub group: Label,
    pub n: usize,
    pub correct: usize,
    pub pct: f64,
}

/// Per-group share of predictions correct at depth `d`; empty groups are omitted.
pub fn group_match_rates(
    preds: &BTreeMap<OsmId, CategoryPath>,
    oracle: &OracleSet,
    osm: &OsmTaxonomy,
    group_by: GroupBy,
    d: usize,
) -> Vec<GroupRate> {
    let mut groups: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    for e in oracle.iter() {
        let group = match group_by {
            GroupBy::OsmKey => osm.get(e.osm).key().clone(),
            GroupBy::FsMain => e.fs_path.main().clone(),
        };
        let slot = groups.entry(group).or_default();
        slot.0 += 1;
        slot.1 += usize::from(preds.get(&e.osm).is_some_and(|p| depth_correct(p, &e.fs_path, d)));
    }
    groups.into_iter().map(|(group, (n, correct))| GroupRate { group, n, correct, pct: percent(correct, n) }).collect()
}

/// All metrics for one prediction source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub n: usize,
    pub top1: DepthProfile,
    pub top1_pct: [f64; MAX_DEPTH],
    pub topk_recall: Vec<RecallCount>,
    pub roc_auc: Option<f64>,
    pub roc_positive: RocPositive,
    pub per_tag_auc: Option<f64>,
    pub by_osm_key: Vec<GroupRate>,
    pub by_fs_main: Vec<GroupRate>,
    /// Depth used for the group tables.
    pub group_depth: usize,
}

/// Options for [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub roc_positive: RocPositive,
    pub per_tag_auc: bool,
    pub group_depth: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20, 30, 40, 50],
            roc_positive: RocPositive::OracleDepth,
            per_tag_auc: false,
            group_depth: 1,
        }
    }
}

/// Scores top-1 predictions and, when candidate lists are given, recall and ROC-AUC.
pub fn evaluate(
    label: &str,
    preds: &BTreeMap<OsmId, CategoryPath>,
    cands: Option<&BTreeMap<OsmId, CandidateList>>,
    oracle: &OracleSet,
    osm: &OsmTaxonomy,
    options: &EvalOptions,
) -> MetricReport {
    let top1 = top1_profile(preds, oracle);
    let (topk_recall, roc_auc, per_tag) = match cands {
        Some(c) => (
            options.ks.iter().map(|&k| topk_recall_count(c, oracle, k)).collect(),
            roc_auc(&roc_pairs(c, oracle, options.roc_positive)).ok(),
            if options.per_tag_auc { per_tag_auc(c, oracle, options.roc_positive) } else { None },
        ),
        None => (Vec::new(), None, None),
    };
    MetricReport {
        label: label.to_owned(),
        n: oracle.len(),
        top1,
        top1_pct: top1.pcts(),
        topk_recall,
        roc_auc,
        roc_positive: options.roc_positive,
        per_tag_auc: per_tag,
        by_osm_key: group_match_rates(preds, oracle, osm, GroupBy::OsmKey, options.group_depth),
        by_fs_main: group_match_rates(preds, oracle, osm, GroupBy::FsMain, options.group_depth),
        group_depth: options.group_depth,
    }
}

/// `label,n,d1..d6,auc` rows.
pub fn write_top1_csv<W: Write>(out: W, reports: &[MetricReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "n", "depth_1", "depth_2", "depth_3", "depth_4", "depth_5", "depth_6", "roc_auc"])?;
    for r in reports {
        let mut row = vec![r.label.clone(), r.n.to_string()];
        row.extend(r.top1_pct.iter().map(|p| format!("{p:.2}")));
        row.push(r.roc_auc.map(|a| format!("{a:.3}")).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `source,k,hits,n,pct` rows.
pub fn write_recall_csv<W: Write>(out: W, reports: &[MetricReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "k", "hits", "n", "pct"])?;
    for r in reports {
        for c in &r.topk_recall {
            w.write_record([
                r.label.as_str(),
                &c.k.to_string(),
                &c.hits.to_string(),
                &c.n.to_string(),
                &format!("{:.2}", c.pct()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `source,group,n,correct,pct` rows, the data behind radar charts.
pub fn write_groups_csv<W: Write>(out: W, reports: &[MetricReport], group_by: GroupBy) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["source", "group", "n", "correct", "pct"])?;
    for r in reports {
        let rows = match group_by {
            GroupBy::OsmKey => &r.by_osm_key,
            GroupBy::FsMain => &r.by_fs_main,
        };
        for g in rows {
            w.write_record([
                r.label.as_str(),
                g.group.as_str(),
                &g.n.to_string(),
                &g.correct.to_string(),
                &format!("{:.2}", g.pct),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `fpr,tpr` points.
pub fn write_roc_curve_csv<W: Write>(out: W, points: &[(f64, f64)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fpr", "tpr"])?;
    for (x, y) in points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
