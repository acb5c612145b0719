//! Prompt templates and rendering.
//!
//! Templates are kept verbatim in `templates/`, trailing spaces included,
//! and filled by plain placeholder substitution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{CandidateList, CorpusVariant};
use crate::taxonomy::{FsTaxonomy, OsmTag};

/// The four prompt variants: with or without fallback categories, with or without a worked example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    NoFallbackNoExample,
    FallbackNoExample,
    NoFallbackExample,
    FallbackExample,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::NoFallbackNoExample,
        PromptStrategy::FallbackNoExample,
        PromptStrategy::NoFallbackExample,
        PromptStrategy::FallbackExample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStrategy::NoFallbackNoExample => "no_fallback_no_example",
            PromptStrategy::FallbackNoExample => "fallback_no_example",
            PromptStrategy::NoFallbackExample => "no_fallback_example",
            PromptStrategy::FallbackExample => "fallback_example",
        }
    }

    pub fn allows_fallback(self) -> bool {
        matches!(self, PromptStrategy::FallbackNoExample | PromptStrategy::FallbackExample)
    }

    pub fn has_example(self) -> bool {
        matches!(self, PromptStrategy::NoFallbackExample | PromptStrategy::FallbackExample)
    }

    /// The raw template with `{osm_tag}`, `{osm_desc}`, `{osm_path}`, `{k}` and `{candidates}` slots.
    pub fn template(self) -> &'static str {
        match self {
            PromptStrategy::NoFallbackNoExample => include_str!("templates/no_fallback_no_example.txt"),
            PromptStrategy::FallbackNoExample => include_str!("templates/fallback_no_example.txt"),
            PromptStrategy::NoFallbackExample => include_str!("templates/no_fallback_example.txt"),
            PromptStrategy::FallbackExample => include_str!("templates/fallback_example.txt"),
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_lowercase().replace(['-', ' '], "_");
        PromptStrategy::ALL
            .into_iter()
            .find(|p| p.as_str() == key)
            .ok_or_else(|| format!("unknown prompt strategy {s:?}"))
    }
}

/// Indentation the templates put in front of the candidate table.
const TABLE_INDENT: &str = "    ";

/// One line per candidate, best first: the leaf and its description joined by
/// a spaced U+2014, or the bare leaf when the variant carries no description.
pub fn render_candidates(candidates: &CandidateList, fs: &FsTaxonomy) -> String {
    candidates
        .candidates
        .iter()
        .map(|c| {
            let cat = fs.get(c.fs);
            let desc = cat.description.as_deref().map(str::trim).filter(|d| !d.is_empty());
            match (candidates.variant, desc) {
                (CorpusVariant::Fid, Some(d)) => format!("{} — {}", cat.leaf(), d),
                _ => cat.leaf().to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join(&format!("\n{TABLE_INDENT}"))
}

/// Instantiates the strategy's template for one OSM tag.
///
/// `{k}` is the number of candidates shown; no FS identifiers or scores are emitted.
pub fn render_prompt(strategy: PromptStrategy, tag: &OsmTag, candidates: &CandidateList, fs: &FsTaxonomy) -> String {
    strategy
        .template()
        .replace("{osm_tag}", tag.tag().as_str())
        .replace("{osm_desc}", tag.description.trim())
        .replace("{osm_path}", &tag.path.to_string())
        .replace("{k}", &candidates.len().to_string())
        .replace("{candidates}", &render_candidates(candidates, fs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in PromptStrategy::ALL {
            assert_eq!(s.as_str().parse::<PromptStrategy>().unwrap(), s);
        }
        assert_eq!("Fallback-Example".parse::<PromptStrategy>().unwrap(), PromptStrategy::FallbackExample);
        assert!("best".parse::<PromptStrategy>().is_err());
    }

    #[test]
    fn templates_have_every_slot() {
        for s in PromptStrategy::ALL {
            let t = s.template();
            for slot in ["{osm_tag}", "{osm_desc}", "{osm_path}", "{k}", "{candidates}"] {
                assert!(t.contains(slot), "{s} lacks {slot}");
            }
            assert!(t.starts_with("\n    I want to map"));
            assert!(t.trim_end().ends_with("Answer only with the FS tag name."));
            assert_eq!(t.contains("- event\n"), s.allows_fallback());
            assert_eq!(t.contains("Correct Answer: landmarks outdoors"), s.has_example());
        }
    }
}
