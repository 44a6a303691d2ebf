//! Keyword-based query dispatch.
//!
//! A question is classified into a [`QueryType`] by an ordered keyword rule
//! table, and each type maps to a [`HeuristicProfile`] that specializes the
//! compiled constraint protocol.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{Constraint, Stage};

/// Rule table shipped with the crate.
pub const DEFAULT_RULES: &str = include_str!("../assets/default.rules");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    Alignment,
    Length,
    Size,
    Color,
    Count,
    Orientation,
    Curvature,
    Other,
}

impl QueryType {
    pub const ALL: [QueryType; 8] = [
        QueryType::Alignment,
        QueryType::Length,
        QueryType::Size,
        QueryType::Color,
        QueryType::Count,
        QueryType::Orientation,
        QueryType::Curvature,
        QueryType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::Alignment => "alignment",
            QueryType::Length => "length",
            QueryType::Size => "size",
            QueryType::Color => "color",
            QueryType::Count => "count",
            QueryType::Orientation => "orientation",
            QueryType::Curvature => "curvature",
            QueryType::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|q| q.as_str() == s)
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("failed to read dispatch rules {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Rule {
    query_type: QueryType,
    keywords: Vec<Vec<String>>,
}

/// Ordered keyword rules; the first rule with a matching keyword wins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTable {
    rules: Vec<Rule>,
}

impl Default for RuleTable {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled dispatch rules are valid")
    }
}

impl RuleTable {
    pub fn parse(source: &str) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            let line_no = idx + 1;
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (head, tail) = body.split_once(":=").ok_or_else(|| RuleError::Parse {
                line: line_no,
                message: "expected `<query-type> := <keyword>[, <keyword>...]`".into(),
            })?;
            let query_type = QueryType::parse(head).ok_or_else(|| RuleError::Parse {
                line: line_no,
                message: format!("unknown query type {:?}", head.trim()),
            })?;
            let mut keywords = Vec::new();
            for kw in tail.split(',') {
                let tokens = tokenize(kw);
                if tokens.is_empty() {
                    return Err(RuleError::Parse {
                        line: line_no,
                        message: format!("empty keyword in rule for {query_type}"),
                    });
                }
                keywords.push(tokens);
            }
            rules.push(Rule {
                query_type,
                keywords,
            });
        }
        Ok(Self { rules })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RuleError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RuleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn classify(&self, question: &str) -> QueryType {
        let tokens = tokenize(question);
        self.rules
            .iter()
            .find(|rule| rule.keywords.iter().any(|kw| contains_run(&tokens, kw)))
            .map(|rule| rule.query_type)
            .unwrap_or(QueryType::Other)
    }
}

/// Classifies with the bundled rule table.
pub fn classify_query(question: &str) -> QueryType {
    thread_local! {
        static DEFAULT: RuleTable = RuleTable::default();
    }
    DEFAULT.with(|t| t.classify(question))
}

// Case folding goes through uppercase first so that text and its uppercased
// form always normalize identically.
fn tokenize(text: &str) -> Vec<String> {
    text.to_uppercase()
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Predicate over constraint records applied before compilation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintFilter {
    /// Keeps records with no `applies_to` list or whose list contains the type.
    AppliesTo(QueryType),
    /// Drops the named records.
    ExcludeIds(BTreeSet<String>),
}

impl ConstraintFilter {
    pub fn keeps(&self, c: &Constraint) -> bool {
        match self {
            ConstraintFilter::AppliesTo(qt) => c.applies_to(*qt),
            ConstraintFilter::ExcludeIds(ids) => !ids.contains(c.id()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileDirective {
    pub stage: Stage,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeuristicProfile {
    pub query_type: QueryType,
    pub extra_directives: Vec<ProfileDirective>,
    pub filters: Vec<ConstraintFilter>,
}

impl HeuristicProfile {
    pub fn keeps(&self, c: &Constraint) -> bool {
        self.filters.iter().all(|f| f.keeps(c))
    }
}

pub const DIRECTIONAL_CONSISTENCY: &str = "Check directional consistency: follow the direction of each visible target segment and decide whether the segments run along one common straight path. Suppress background grids, stripes and crossing lines, which bias the apparent direction.";

pub const SEGMENT_EXTENSION: &str = "Extend each target segment across any gap or occluder in your mind and check whether the extensions meet; accept misalignment only if they clearly miss each other.";

pub const SURFACE_ISOLATION: &str = "Isolate the target surfaces strictly: compare the colors of the target surfaces themselves, as if each were cut out and placed side by side on a neutral background. Ignore shadows, gradients and neighbouring colors.";

/// Pure table lookup from query type to its specialization.
pub fn heuristic_profile(qt: QueryType) -> HeuristicProfile {
    let extra_directives = match qt {
        QueryType::Alignment => vec![
            ProfileDirective {
                stage: Stage::Decomposition,
                text: DIRECTIONAL_CONSISTENCY.to_string(),
            },
            ProfileDirective {
                stage: Stage::Counterfactual,
                text: SEGMENT_EXTENSION.to_string(),
            },
        ],
        QueryType::Color => vec![ProfileDirective {
            stage: Stage::Decomposition,
            text: SURFACE_ISOLATION.to_string(),
        }],
        // No grounded specialization yet for the remaining types.
        _ => Vec::new(),
    };
    HeuristicProfile {
        query_type: qt,
        extra_directives,
        filters: vec![ConstraintFilter::AppliesTo(qt)],
    }
}
