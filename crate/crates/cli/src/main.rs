//! `osmfs`: align OSM tags with the Foursquare taxonomy and score the result.
//!
//! Exit codes: 0 success, 1 partial (unresolved items or an interrupted
//! provider run), 2 input or validation failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{EvalArgs, RefineArgs, ReportArgs, RetrieveArgs, Source, Status};
use config::{ProviderKind, RunConfig};
use osmfs_core::embedding::{CorpusVariant, EmbedError, OsmQueryMode};
use osmfs_core::eval::RocPositive;
use osmfs_core::PromptStrategy;

#[derive(Parser)]
#[command(name = "osmfs", version, about = "OSM to Foursquare taxonomy alignment")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    osm: Option<PathBuf>,
    #[arg(long, global = true)]
    fs: Option<PathBuf>,
    /// FS descriptions file.
    #[arg(long = "fs-desc", global = true)]
    fs_desc: Option<PathBuf>,
    #[arg(long, global = true)]
    oracle: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Accept shortlist sizes outside 5, 10, 20, 30, 40, 50.
    #[arg(long = "allow-any-k", global = true)]
    allow_any_k: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Taxonomy summary, plus oracle statistics when --oracle is given.
    Stats,
    /// Rank FS candidates for every OSM tag by embedding similarity.
    Retrieve {
        #[arg(long)]
        variant: Option<CorpusVariant>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
        /// Embedding service base URL.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Embedding cache file.
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long = "osm-query")]
        osm_query: Option<OsmQueryMode>,
    },
    /// Re-rank stored candidates with a chat model.
    Refine(RefineFlags),
    /// Refine twice, the second time with the oracle match listed first.
    Probe(RefineFlags),
    /// Score prediction or candidate files against the oracle.
    Evaluate(EvalFlags),
    /// Write markdown and CSV tables for the dataset, oracle and any given sources.
    Report {
        #[command(flatten)]
        eval: EvalFlags,
        /// Refinement output in shortlist order.
        #[arg(long = "probe-baseline")]
        probe_baseline: Option<PathBuf>,
        /// Refinement output with the oracle match listed first.
        #[arg(long)]
        probe: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RefineFlags {
    /// Candidate file written by `retrieve`.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    variant: Option<CorpusVariant>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    strategy: Option<PromptStrategy>,
    #[arg(long)]
    model: Option<String>,
    /// Chat completion base URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Answer from these audit logs instead of calling the endpoint.
    #[arg(long)]
    replay: Vec<PathBuf>,
    #[arg(long)]
    audit: Option<PathBuf>,
}

impl From<RefineFlags> for RefineArgs {
    fn from(f: RefineFlags) -> Self {
        RefineArgs {
            candidates: f.candidates,
            variant: f.variant,
            k: f.k,
            strategy: f.strategy,
            model: f.model,
            endpoint: f.endpoint,
            replay: f.replay,
            audit: f.audit,
        }
    }
}

#[derive(Args)]
struct EvalFlags {
    /// Top-1 prediction file, as PATH or LABEL=PATH.
    #[arg(long)]
    predictions: Vec<Source>,
    /// Ranked candidate file, as PATH or LABEL=PATH.
    #[arg(long)]
    candidates: Vec<Source>,
    #[arg(long)]
    variant: Option<CorpusVariant>,
    /// Recall cut-offs, comma separated.
    #[arg(long = "k", value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long = "roc-positive")]
    roc_positive: Option<RocPositive>,
    /// Also report the mean of per-tag AUCs.
    #[arg(long = "per-tag-auc")]
    per_tag_auc: bool,
}

impl From<EvalFlags> for EvalArgs {
    fn from(f: EvalFlags) -> Self {
        EvalArgs {
            predictions: f.predictions,
            candidates: f.candidates,
            variant: f.variant,
            ks: f.ks,
            roc_positive: f.roc_positive,
            per_tag_auc: f.per_tag_auc,
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (slot, flag) in [
        (&mut cfg.osm, &cli.osm),
        (&mut cfg.fs, &cli.fs),
        (&mut cfg.fs_desc, &cli.fs_desc),
        (&mut cfg.oracle, &cli.oracle),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.allow_any_k |= cli.allow_any_k;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Status> {
    let mut cfg = build_config(&cli)?;
    match cli.command {
        Command::Stats => commands::stats(&cfg, cli.json),
        Command::Retrieve { variant, k, provider, endpoint, model, vectors, osm_query } => {
            commands::retrieve(&mut cfg, RetrieveArgs { variant, k, provider, endpoint, model, vectors, osm_query })
        }
        Command::Refine(f) => commands::refine(&mut cfg, f.into()),
        Command::Probe(f) => commands::probe(&mut cfg, f.into()),
        Command::Evaluate(f) => commands::evaluate_cmd(&mut cfg, f.into(), cli.json),
        Command::Report { eval, probe_baseline, probe } => {
            commands::report(&mut cfg, ReportArgs { eval: eval.into(), probe_baseline, probe })
        }
    }
}

/// A provider that stopped mid-run leaves a resumable cache behind, so it counts as partial.
fn exit_code(err: &anyhow::Error) -> u8 {
    let resumable = err.chain().any(|e| {
        matches!(e.downcast_ref::<EmbedError>(), Some(EmbedError::Partial { .. } | EmbedError::Unavailable(_)))
    });
    if resumable {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
