//! Markdown and CSV rendering of the evaluation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmark::{CoverageRow, MatchCounts, MatchType, OracleSet};
use crate::eval::{self, depth_correct, DepthProfile, GroupBy, MetricReport};
use crate::ingest::{osm_key, SummaryStats};
use crate::taxonomy::{CategoryPath, Label, OsmId, OsmTaxonomy, MAX_DEPTH};

/// A tag whose prediction misses the oracle path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub osm_tag: String,
    pub oracle: CategoryPath,
    pub predicted: Option<CategoryPath>,
    pub match_type: MatchType,
    /// Deepest level on which prediction and oracle agree.
    pub agreed_depth: usize,
}

/// Oracle tags whose prediction is wrong at full oracle depth, in taxonomy order.
pub fn mismatches(preds: &BTreeMap<OsmId, CategoryPath>, oracle: &OracleSet, osm: &OsmTaxonomy) -> Vec<Mismatch> {
    oracle
        .iter()
        .filter_map(|e| {
            let pred = preds.get(&e.osm);
            if pred.is_some_and(|p| depth_correct(p, &e.fs_path, MAX_DEPTH)) {
                return None;
            }
            let agreed_depth =
                pred.map_or(0, |p| p.labels().iter().zip(e.fs_path.labels()).take_while(|(a, b)| a == b).count());
            Some(Mismatch {
                osm_tag: osm_key(osm.get(e.osm)),
                oracle: e.fs_path.clone(),
                predicted: pred.cloned(),
                match_type: e.match_type,
                agreed_depth,
            })
        })
        .collect()
}

pub fn write_mismatches_csv<W: io::Write>(out: W, rows: &[Mismatch]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["osm_tag", "oracle_path", "predicted_path", "match_type", "agreed_depth"])?;
    for m in rows {
        w.write_record([
            m.osm_tag.as_str(),
            &m.oracle.to_string(),
            &m.predicted.as_ref().map(ToString::to_string).unwrap_or_default(),
            m.match_type.as_str(),
            &m.agreed_depth.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Top-1 profile with and without the oracle match promoted to the first slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub baseline: DepthProfile,
    pub probed: DepthProfile,
}

/// Everything a report may contain; absent parts are skipped.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportInput {
    pub osm_stats: Option<SummaryStats>,
    pub fs_stats: Option<SummaryStats>,
    pub coverage: Option<Vec<CoverageRow>>,
    pub histogram: Option<BTreeMap<Label, MatchCounts>>,
    pub match_totals: Option<MatchCounts>,
    pub distinct_fs_paths: Option<usize>,
    pub metrics: Vec<MetricReport>,
    pub probe: Option<ProbeComparison>,
    /// Source label and rows of the mismatch listing.
    pub mismatches: Option<(String, Vec<Mismatch>)>,
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn stats_rows(label: &str, s: &SummaryStats) -> Vec<String> {
    let mut row = vec![label.to_owned(), s.total_tags.to_string(), s.top_level_count.to_string()];
    row.extend((1..=MAX_DEPTH).map(|d| s.per_depth.get(&d).copied().unwrap_or(0).to_string()));
    row
}

fn pct_row(label: &str, p: &DepthProfile) -> Vec<String> {
    let mut row = vec![label.to_owned()];
    row.extend(p.pcts().iter().map(|x| format!("{x:.2}")));
    row
}

const DEPTH_HEADER: [&str; 7] = ["source", "depth 1", "depth 2", "depth 3", "depth 4", "depth 5", "depth 6"];

/// Renders the report as markdown with a fixed section order.
pub fn render_markdown(input: &ReportInput) -> String {
    let mut out = String::from("# OSM to FS alignment report\n\n");

    if input.osm_stats.is_some() || input.fs_stats.is_some() {
        out.push_str("## Taxonomy summary\n\n");
        let rows: Vec<Vec<String>> = [("OSM", &input.osm_stats), ("FS", &input.fs_stats)]
            .into_iter()
            .filter_map(|(l, s)| s.as_ref().map(|s| stats_rows(l, s)))
            .collect();
        table(&mut out, &["taxonomy", "tags", "top level", "d1", "d2", "d3", "d4", "d5", "d6"], &rows);
    }

    if let Some(t) = &input.match_totals {
        out.push_str("## Oracle match types\n\n");
        let rows = MatchType::ALL
            .iter()
            .map(|m| vec![m.as_str().to_owned(), t.get(*m).to_string()])
            .chain([vec!["total".into(), t.total().to_string()]])
            .collect::<Vec<_>>();
        table(&mut out, &["match type", "tags"], &rows);
    }

    if let Some(cov) = &input.coverage {
        out.push_str("## FS main-category coverage\n\n");
        let mut rows: Vec<Vec<String>> = cov
            .iter()
            .map(|r| vec![r.main.to_string(), r.used.to_string(), r.available.to_string(), format!("{:.2}", r.pct)])
            .collect();
        let used: usize = cov.iter().map(|r| r.used).sum();
        let available: usize = cov.iter().map(|r| r.available).sum();
        rows.push(vec![
            "total".into(),
            used.to_string(),
            available.to_string(),
            format!("{:.2}", eval::percent(used, available)),
        ]);
        table(&mut out, &["FS main", "used", "available", "coverage %"], &rows);
        if let Some(n) = input.distinct_fs_paths {
            let _ = writeln!(out, "Distinct FS paths used by the oracle: {n}\n");
        }
    }

    if let Some(h) = &input.histogram {
        out.push_str("## Match types by FS main category\n\n");
        let rows: Vec<Vec<String>> = h
            .iter()
            .map(|(m, c)| {
                vec![
                    m.to_string(),
                    c.lexical.to_string(),
                    c.semantic.to_string(),
                    c.main_category.to_string(),
                    c.total().to_string(),
                ]
            })
            .collect();
        table(&mut out, &["FS main", "lexical", "semantic", "main category", "total"], &rows);
    }

    if !input.metrics.is_empty() {
        out.push_str("## Top-1 accuracy by depth\n\n");
        let rows: Vec<Vec<String>> = input.metrics.iter().map(|m| pct_row(&m.label, &m.top1)).collect();
        table(&mut out, &DEPTH_HEADER, &rows);

        let aucs: Vec<Vec<String>> = input
            .metrics
            .iter()
            .filter_map(|m| {
                m.roc_auc.map(|a| vec![m.label.clone(), format!("{a:.3}"), format!("{:.2}", m.top1_pct[MAX_DEPTH - 1])])
            })
            .collect();
        if !aucs.is_empty() {
            out.push_str("## ROC-AUC\n\n");
            table(&mut out, &["source", "ROC-AUC", "top-1 %"], &aucs);
        }

        let ks: Vec<usize> = {
            let mut ks: Vec<usize> = input.metrics.iter().flat_map(|m| m.topk_recall.iter().map(|r| r.k)).collect();
            ks.sort_unstable();
            ks.dedup();
            ks
        };
        if !ks.is_empty() {
            out.push_str("## Top-k recall\n\n");
            let header: Vec<String> =
                std::iter::once("source".to_owned()).chain(ks.iter().map(|k| format!("top-{k}"))).collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<String>> = input
                .metrics
                .iter()
                .filter(|m| !m.topk_recall.is_empty())
                .map(|m| {
                    std::iter::once(m.label.clone())
                        .chain(ks.iter().map(|k| {
                            m.topk_recall
                                .iter()
                                .find(|r| r.k == *k)
                                .map(|r| format!("{:.2}", r.pct()))
                                .unwrap_or_default()
                        }))
                        .collect()
                })
                .collect();
            table(&mut out, &header, &rows);
        }
    }

    if let Some(p) = &input.probe {
        out.push_str("## Positional probe\n\n");
        let mut delta = vec!["difference".to_owned()];
        delta.extend((1..=MAX_DEPTH).map(|d| format!("{:+.2}", p.probed.pct(d) - p.baseline.pct(d))));
        table(
            &mut out,
            &DEPTH_HEADER,
            &[pct_row("shortlist order", &p.baseline), pct_row("oracle match first", &p.probed), delta],
        );
    }

    for (title, by) in [("OSM key", GroupBy::OsmKey), ("FS main category", GroupBy::FsMain)] {
        let rows: Vec<Vec<String>> = input
            .metrics
            .iter()
            .flat_map(|m| {
                let groups = match by {
                    GroupBy::OsmKey => &m.by_osm_key,
                    GroupBy::FsMain => &m.by_fs_main,
                };
                groups
                    .iter()
                    .map(move |g| vec![m.label.clone(), g.group.to_string(), g.n.to_string(), format!("{:.2}", g.pct)])
            })
            .collect();
        if !rows.is_empty() {
            let _ = writeln!(out, "## Match rate by {title}\n");
            table(&mut out, &["source", "group", "tags", "match %"], &rows);
        }
    }

    if let Some((source, rows)) = &input.mismatches {
        let _ = writeln!(out, "## Mismatches ({source})\n");
        let shown: Vec<Vec<String>> = rows
            .iter()
            .map(|m| {
                vec![
                    m.osm_tag.clone(),
                    m.oracle.to_string(),
                    m.predicted.as_ref().map(ToString::to_string).unwrap_or_else(|| "(none)".into()),
                    m.agreed_depth.to_string(),
                ]
            })
            .collect();
        table(&mut out, &["OSM tag", "oracle", "model", "agreed depth"], &shown);
    }
    out
}

/// Writes `report.md`, `report.json` and one CSV per table into `dir`; returns the files written.
pub fn write_report_dir(dir: &Path, input: &ReportInput) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> io::Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    let csv_err = |e: csv::Error| io::Error::other(e.to_string());

    put("report.md", render_markdown(input).into_bytes())?;
    put("report.json", serde_json::to_vec_pretty(input).map_err(io::Error::other)?)?;
    if let Some(cov) = &input.coverage {
        let mut buf = Vec::new();
        crate::benchmark::write_coverage_csv(&mut buf, cov).map_err(csv_err)?;
        put("coverage.csv", buf)?;
    }
    if let Some(h) = &input.histogram {
        let mut buf = Vec::new();
        crate::benchmark::write_histogram_csv(&mut buf, h).map_err(csv_err)?;
        put("match_types.csv", buf)?;
    }
    if !input.metrics.is_empty() {
        let mut buf = Vec::new();
        eval::write_top1_csv(&mut buf, &input.metrics).map_err(csv_err)?;
        put("top1_by_depth.csv", buf)?;
        let mut buf = Vec::new();
        eval::write_recall_csv(&mut buf, &input.metrics).map_err(csv_err)?;
        put("topk_recall.csv", buf)?;
        let mut buf = Vec::new();
        eval::write_groups_csv(&mut buf, &input.metrics, GroupBy::OsmKey).map_err(csv_err)?;
        put("radar_osm_key.csv", buf)?;
        let mut buf = Vec::new();
        eval::write_groups_csv(&mut buf, &input.metrics, GroupBy::FsMain).map_err(csv_err)?;
        put("radar_fs_main.csv", buf)?;
    }
    if let Some((_, rows)) = &input.mismatches {
        let mut buf = Vec::new();
        write_mismatches_csv(&mut buf, rows).map_err(csv_err)?;
        put("mismatches.csv", buf)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::OracleEntry;
    use crate::eval::{evaluate, EvalOptions};
    use crate::taxonomy::{EntryId, OsmTag, Taxonomy};

    fn path(p: &[&str]) -> CategoryPath {
        CategoryPath::from_raw(p).unwrap()
    }

    fn fixture() -> (OsmTaxonomy, OracleSet, BTreeMap<OsmId, CategoryPath>) {
        let osm = Taxonomy::new(vec![
            OsmTag { path: path(&["shop", "music"]), description: String::new(), elements: Default::default() },
            OsmTag { path: path(&["natural", "valley"]), description: String::new(), elements: Default::default() },
        ]);
        let oracle: OracleSet = [
            OracleEntry { osm: EntryId(0), fs_path: path(&["retail", "music store"]), match_type: MatchType::Semantic },
            OracleEntry {
                osm: EntryId(1),
                fs_path: path(&["landmarks and outdoors"]),
                match_type: MatchType::MainCategory,
            },
        ]
        .into_iter()
        .collect();
        let mut preds = BTreeMap::new();
        preds.insert(EntryId(0), path(&["retail", "record store"]));
        preds.insert(EntryId(1), path(&["landmarks and outdoors", "hill"]));
        (osm, oracle, preds)
    }

    #[test]
    fn mismatch_listing_keeps_only_misses() {
        let (osm, oracle, preds) = fixture();
        let m = mismatches(&preds, &oracle, &osm);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].osm_tag, "shop > music");
        assert_eq!(m[0].agreed_depth, 1);
    }

    #[test]
    fn report_is_byte_stable() {
        let (osm, oracle, preds) = fixture();
        let metrics = vec![evaluate("toy", &preds, None, &oracle, &osm, &EvalOptions::default())];
        let input = ReportInput {
            metrics,
            mismatches: Some(("toy".into(), mismatches(&preds, &oracle, &osm))),
            ..Default::default()
        };
        let a = render_markdown(&input);
        assert_eq!(a, render_markdown(&input));
        assert!(a.contains("| toy | 100.00 | 50.00 | 50.00 | 50.00 | 50.00 | 50.00 |"));
        assert!(a.contains("| shop > music | retail > music store | retail > record store | 1 |"));

        let dir = tempfile::tempdir().unwrap();
        let files = write_report_dir(dir.path(), &input).unwrap();
        assert!(files.iter().any(|f| f.ends_with("radar_fs_main.csv")));
        let first = fs::read(dir.path().join("report.md")).unwrap();
        write_report_dir(dir.path(), &input).unwrap();
        assert_eq!(first, fs::read(dir.path().join("report.md")).unwrap());
    }
}
