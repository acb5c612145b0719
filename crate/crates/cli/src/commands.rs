use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use osmfs_core::benchmark::{
    coverage_by_fs_main, load_oracle, match_type_histogram, MatchCounts, MatchType, OracleSet,
};
use osmfs_core::embedding::{
    align_all, candidate_lists_from, write_candidates, CachedProvider, CandidateList, CorpusVariant, EmbeddingCache,
    HttpEmbeddingProvider, TokenHashProvider, VectorFileProvider,
};
use osmfs_core::eval::{evaluate, MetricReport};
use osmfs_core::ingest::{load_descriptions, load_fs, load_osm, load_predictions, summarize, ValidationReport};
use osmfs_core::refine::{
    positional_probe, refine_all, write_results, write_unresolved, AuditLog, ChatClient, FallbackSet, HttpChatClient,
    RefineContext, RefinementRun, ReplayChatClient, API_KEY_ENV, DEFAULT_CHAT_ENDPOINT,
};
use osmfs_core::report::{mismatches, write_report_dir, ProbeComparison, ReportInput};
use osmfs_core::{CategoryPath, FsTaxonomy, OsmId, OsmTaxonomy};

use crate::config::{require, ProviderKind, RunConfig};

/// How a command finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Finished, but some items were left unresolved.
    Partial,
}

fn print_warnings(report: &ValidationReport) {
    for line in report.lines() {
        eprintln!("{line}");
    }
}

pub struct Taxonomies {
    pub osm: OsmTaxonomy,
    pub fs: FsTaxonomy,
}

pub fn load_taxonomies(cfg: &RunConfig) -> Result<Taxonomies> {
    let osm_path = require(&cfg.osm, "--osm")?;
    let fs_path = require(&cfg.fs, "--fs")?;
    let osm = load_osm(&osm_path, &cfg.columns.osm)?;
    print_warnings(&osm.report);
    let mut fs = load_fs(&fs_path, &cfg.columns.fs)?;
    print_warnings(&fs.report);
    if cfg.fs_desc.is_some() {
        let desc_path = require(&cfg.fs_desc, "--fs-desc")?;
        let described = load_descriptions(&fs.value, &desc_path, &cfg.columns.descriptions)?;
        print_warnings(&described.report);
        fs = described;
    }
    Ok(Taxonomies { osm: osm.value, fs: fs.value })
}

pub fn load_oracle_set(cfg: &RunConfig, t: &Taxonomies) -> Result<OracleSet> {
    let path = require(&cfg.oracle, "--oracle")?;
    let (oracle, report) = load_oracle(&path, &cfg.columns.oracle, &t.osm, &t.fs)?;
    print_warnings(&report);
    Ok(oracle)
}

fn match_totals(oracle: &OracleSet) -> MatchCounts {
    let mut c = MatchCounts::default();
    for e in oracle.iter() {
        c.add(e.match_type);
    }
    c
}

pub fn stats(cfg: &RunConfig, as_json: bool) -> Result<Status> {
    let t = load_taxonomies(cfg)?;
    let (osm, fs) = (summarize(&t.osm), summarize(&t.fs));
    let oracle = if cfg.oracle.is_some() { Some(load_oracle_set(cfg, &t)?) } else { None };
    let mut input = ReportInput { osm_stats: Some(osm.clone()), fs_stats: Some(fs.clone()), ..Default::default() };
    if let Some(o) = &oracle {
        input.match_totals = Some(match_totals(o));
        input.coverage = Some(coverage_by_fs_main(o, &t.fs));
        input.distinct_fs_paths = Some(o.distinct_fs_paths().len());
        input.histogram = Some(match_type_histogram(o, &t.fs));
    }
    if as_json {
        let mut doc = json!({ "osm": osm, "fs": fs });
        if let Some(o) = &oracle {
            doc["oracle"] = json!({
                "total": o.len(),
                "match_types": MatchType::ALL.iter().map(|m| (m.as_str(), o.count(*m))).collect::<BTreeMap<_, _>>(),
                "distinct_fs_paths": o.distinct_fs_paths().len(),
                "coverage": input.coverage,
            });
        }
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print!("{}", osmfs_core::report::render_markdown(&input));
    }
    Ok(Status::Success)
}

pub struct RetrieveArgs {
    pub variant: Option<CorpusVariant>,
    pub k: Option<usize>,
    pub provider: Option<ProviderKind>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub vectors: Option<PathBuf>,
    pub osm_query: Option<osmfs_core::embedding::OsmQueryMode>,
}

pub fn retrieve(cfg: &mut RunConfig, args: RetrieveArgs) -> Result<Status> {
    let r = &mut cfg.retrieval;
    r.options.variant = args.variant.unwrap_or(r.options.variant);
    r.options.k = args.k.unwrap_or(r.options.k);
    r.options.osm_query = args.osm_query.unwrap_or(r.options.osm_query);
    r.provider = args.provider.unwrap_or(r.provider);
    if let Some(e) = args.endpoint {
        r.endpoint = e;
    }
    if let Some(m) = args.model {
        r.model = m;
    }
    if args.vectors.is_some() {
        r.vectors = args.vectors;
    }
    cfg.check_k(cfg.retrieval.options.k)?;
    let t = load_taxonomies(cfg)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
    let vectors = cfg.vectors_path();
    let r = &cfg.retrieval;

    let (alignment, calls) = match r.provider {
        ProviderKind::File => {
            if !vectors.exists() {
                bail!("{} does not exist (vector file for --provider file)", vectors.display());
            }
            let p = VectorFileProvider::open(&vectors, r.model.clone())?;
            (align_all(&t.osm, &t.fs, &p, &r.options)?, 0)
        }
        ProviderKind::Http => {
            let inner = HttpEmbeddingProvider::new(r.endpoint.clone(), r.model.clone());
            let p = CachedProvider::new(inner, EmbeddingCache::open_or_create(&vectors)?);
            let a = align_all(&t.osm, &t.fs, &p, &r.options)?;
            (a, p.provider_calls())
        }
        ProviderKind::Hash => {
            let p = CachedProvider::new(
                TokenHashProvider::new(r.hash_dimension),
                EmbeddingCache::open_or_create(&vectors)?,
            );
            let a = align_all(&t.osm, &t.fs, &p, &r.options)?;
            (a, p.provider_calls())
        }
    };
    for w in &alignment.warnings {
        eprintln!("warning: {w}");
    }
    let out = cfg.out.join(format!("candidates_{}.csv", r.options.variant.as_str()));
    write_candidates(BufWriter::new(File::create(&out)?), &alignment.lists, &t.osm)?;
    eprintln!(
        "wrote {} candidate lists (k = {}) to {}; provider calls: {calls}",
        alignment.lists.len(),
        r.options.k,
        out.display()
    );
    Ok(Status::Success)
}

pub fn load_candidates(
    cfg: &RunConfig,
    t: &Taxonomies,
    path: &Path,
    variant: CorpusVariant,
) -> Result<BTreeMap<OsmId, CandidateList>> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    let set = load_predictions(path, &cfg.columns.predictions, &t.osm)?;
    Ok(candidate_lists_from(&set, &t.fs, variant)?)
}

fn chat_client(cfg: &RunConfig) -> Result<Box<dyn ChatClient>> {
    if !cfg.refine.replay.is_empty() {
        for p in &cfg.refine.replay {
            if !p.exists() {
                bail!("{} does not exist (replay log)", p.display());
            }
        }
        let paths: Vec<&Path> = cfg.refine.replay.iter().map(PathBuf::as_path).collect();
        return Ok(Box::new(ReplayChatClient::open(&paths)?));
    }
    let client = HttpChatClient::from_env(cfg.refine.endpoint.clone());
    if cfg.refine.endpoint == DEFAULT_CHAT_ENDPOINT && std::env::var(API_KEY_ENV).map_or(true, |k| k.is_empty()) {
        bail!("set {API_KEY_ENV} to call {DEFAULT_CHAT_ENDPOINT}, or pass --replay");
    }
    Ok(Box::new(client))
}

pub struct RefineArgs {
    pub candidates: PathBuf,
    pub variant: Option<CorpusVariant>,
    pub k: Option<usize>,
    pub strategy: Option<osmfs_core::PromptStrategy>,
    pub model: Option<String>,
    pub endpoint: Option<String>,
    pub replay: Vec<PathBuf>,
    pub audit: Option<PathBuf>,
}

fn apply_refine_args(cfg: &mut RunConfig, args: &RefineArgs) -> Result<CorpusVariant> {
    let r = &mut cfg.refine;
    r.config.k = args.k.unwrap_or(r.config.k);
    r.config.strategy = args.strategy.unwrap_or(r.config.strategy);
    if let Some(m) = &args.model {
        r.config.model_id = m.clone();
    }
    if let Some(e) = &args.endpoint {
        r.endpoint = e.clone();
    }
    if !args.replay.is_empty() {
        r.replay = args.replay.clone();
    }
    if args.audit.is_some() {
        r.audit = args.audit.clone();
    }
    cfg.check_k(cfg.refine.config.k)?;
    cfg.refine.config.validate(cfg.allow_any_k)?;
    Ok(args.variant.unwrap_or(cfg.retrieval.options.variant))
}

fn write_run(cfg: &RunConfig, t: &Taxonomies, run: &RefinementRun, stem: &str) -> Result<()> {
    let results = cfg.out.join(format!("{stem}.csv"));
    write_results(BufWriter::new(File::create(&results)?), run, &t.osm)?;
    let sidecar = cfg.out.join(format!("{stem}_unresolved.csv"));
    write_unresolved(BufWriter::new(File::create(&sidecar)?), run, &t.osm)?;
    eprintln!(
        "{stem}: {} resolved, {} unresolved ({}), {} chat calls, {} cached",
        run.results.len(),
        run.unresolved.len(),
        sidecar.display(),
        run.client_calls,
        run.cached_calls
    );
    Ok(())
}

pub fn refine(cfg: &mut RunConfig, args: RefineArgs) -> Result<Status> {
    let variant = apply_refine_args(cfg, &args)?;
    let t = load_taxonomies(cfg)?;
    let cands = load_candidates(cfg, &t, &args.candidates, variant)?;
    let fallback = FallbackSet::resolve(&t.fs)?;
    let client = chat_client(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let audit = AuditLog::open(&cfg.audit_path())?;
    let ctx = RefineContext { osm: &t.osm, fs: &t.fs, fallback: &fallback };
    let run = refine_all(&cands, ctx, &cfg.refine.config, client.as_ref(), &audit)?;
    let stem = format!("refined_{}_k{}", cfg.refine.config.strategy, cfg.refine.config.k);
    write_run(cfg, &t, &run, &stem)?;
    Ok(if run.unresolved.is_empty() { Status::Success } else { Status::Partial })
}

pub fn probe(cfg: &mut RunConfig, args: RefineArgs) -> Result<Status> {
    let variant = apply_refine_args(cfg, &args)?;
    let t = load_taxonomies(cfg)?;
    let oracle = load_oracle_set(cfg, &t)?;
    let cands = load_candidates(cfg, &t, &args.candidates, variant)?;
    let fallback = FallbackSet::resolve(&t.fs)?;
    let client = chat_client(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let audit = AuditLog::open(&cfg.audit_path())?;
    let ctx = RefineContext { osm: &t.osm, fs: &t.fs, fallback: &fallback };
    let baseline = refine_all(&cands, ctx, &cfg.refine.config, client.as_ref(), &audit)?;
    let probed = positional_probe(&cands, &oracle, ctx, &cfg.refine.config, client.as_ref(), &audit)?;
    let stem = format!("refined_{}_k{}", cfg.refine.config.strategy, cfg.refine.config.k);
    write_run(cfg, &t, &baseline, &stem)?;
    write_run(cfg, &t, &probed.run, &format!("{stem}_probe"))?;
    let cmp = ProbeComparison {
        baseline: osmfs_core::eval::top1_profile(&baseline.predictions(), &oracle),
        probed: probed.accuracy,
    };
    eprintln!("moved the oracle match to the front in {} lists", probed.moved);
    print!("{}", osmfs_core::report::render_markdown(&ReportInput { probe: Some(cmp), ..Default::default() }));
    let partial = !baseline.unresolved.is_empty() || !probed.run.unresolved.is_empty();
    Ok(if partial { Status::Partial } else { Status::Success })
}

/// A prediction source given as `PATH` or `LABEL=PATH`.
#[derive(Debug, Clone)]
pub struct Source {
    pub label: String,
    pub path: PathBuf,
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (label, path) = match s.split_once('=') {
            Some((l, p)) if !l.is_empty() => (l.to_owned(), PathBuf::from(p)),
            _ => {
                let p = PathBuf::from(s);
                let stem = p.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_else(|| s.to_owned());
                (stem, p)
            }
        };
        Ok(Source { label, path })
    }
}

pub struct EvalArgs {
    pub predictions: Vec<Source>,
    pub candidates: Vec<Source>,
    pub variant: Option<CorpusVariant>,
    pub ks: Option<Vec<usize>>,
    pub roc_positive: Option<osmfs_core::eval::RocPositive>,
    pub per_tag_auc: bool,
}

struct Scored {
    reports: Vec<MetricReport>,
    first_preds: Option<(String, BTreeMap<OsmId, CategoryPath>)>,
}

fn score_sources(cfg: &mut RunConfig, args: &EvalArgs, t: &Taxonomies, oracle: &OracleSet) -> Result<Scored> {
    if let Some(ks) = &args.ks {
        for k in ks {
            cfg.check_k(*k)?;
        }
        cfg.eval.ks = ks.clone();
    }
    cfg.eval.roc_positive = args.roc_positive.unwrap_or(cfg.eval.roc_positive);
    cfg.eval.per_tag_auc |= args.per_tag_auc;
    let variant = args.variant.unwrap_or(cfg.retrieval.options.variant);
    if args.predictions.is_empty() && args.candidates.is_empty() {
        bail!("nothing to evaluate: pass --predictions or --candidates");
    }
    let mut reports = Vec::new();
    let mut first_preds = None;
    for src in &args.predictions {
        if !src.path.exists() {
            bail!("{} does not exist", src.path.display());
        }
        let set = load_predictions(&src.path, &cfg.columns.predictions, &t.osm)?;
        if set.is_empty() {
            bail!("{} holds no predictions", src.path.display());
        }
        let preds = set.top1();
        reports.push(evaluate(&src.label, &preds, None, oracle, &t.osm, &cfg.eval));
        first_preds.get_or_insert((src.label.clone(), preds));
    }
    for src in &args.candidates {
        let cands = load_candidates(cfg, t, &src.path, variant)?;
        if cands.is_empty() {
            bail!("{} holds no candidates", src.path.display());
        }
        let preds = osmfs_core::eval::top1_of(&cands);
        reports.push(evaluate(&src.label, &preds, Some(&cands), oracle, &t.osm, &cfg.eval));
        first_preds.get_or_insert((src.label.clone(), preds));
    }
    Ok(Scored { reports, first_preds })
}

pub fn evaluate_cmd(cfg: &mut RunConfig, args: EvalArgs, as_json: bool) -> Result<Status> {
    let t = load_taxonomies(cfg)?;
    let oracle = load_oracle_set(cfg, &t)?;
    let scored = score_sources(cfg, &args, &t, &oracle)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("metrics.json"), serde_json::to_vec_pretty(&scored.reports)?)?;
    osmfs_core::eval::write_top1_csv(File::create(cfg.out.join("top1_by_depth.csv"))?, &scored.reports)?;
    osmfs_core::eval::write_recall_csv(File::create(cfg.out.join("topk_recall.csv"))?, &scored.reports)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&scored.reports)?);
    } else {
        print!(
            "{}",
            osmfs_core::report::render_markdown(&ReportInput { metrics: scored.reports, ..Default::default() })
        );
    }
    Ok(Status::Success)
}

pub struct ReportArgs {
    pub eval: EvalArgs,
    pub probe_baseline: Option<PathBuf>,
    pub probe: Option<PathBuf>,
}

pub fn report(cfg: &mut RunConfig, args: ReportArgs) -> Result<Status> {
    let t = load_taxonomies(cfg)?;
    let oracle = load_oracle_set(cfg, &t)?;
    let mut input = ReportInput {
        osm_stats: Some(summarize(&t.osm)),
        fs_stats: Some(summarize(&t.fs)),
        coverage: Some(coverage_by_fs_main(&oracle, &t.fs)),
        histogram: Some(match_type_histogram(&oracle, &t.fs)),
        match_totals: Some(match_totals(&oracle)),
        distinct_fs_paths: Some(oracle.distinct_fs_paths().len()),
        ..Default::default()
    };
    if !args.eval.predictions.is_empty() || !args.eval.candidates.is_empty() {
        let scored = score_sources(cfg, &args.eval, &t, &oracle)?;
        input.metrics = scored.reports;
        if let Some((label, preds)) = scored.first_preds {
            input.mismatches = Some((label, mismatches(&preds, &oracle, &t.osm)));
        }
    }
    match (&args.probe_baseline, &args.probe) {
        (Some(b), Some(p)) => {
            let profile = |path: &Path| -> Result<_> {
                if !path.exists() {
                    bail!("{} does not exist", path.display());
                }
                let set = load_predictions(path, &cfg.columns.predictions, &t.osm)?;
                Ok(osmfs_core::eval::top1_profile(&set.top1(), &oracle))
            };
            input.probe = Some(ProbeComparison { baseline: profile(b)?, probed: profile(p)? });
        }
        (None, None) => {}
        _ => bail!("--probe-baseline and --probe must be given together"),
    }
    let dir = cfg.out.join("report");
    let files = write_report_dir(&dir, &input)?;
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(Status::Success)
}
