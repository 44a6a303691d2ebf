//! Qualitative constraint sets and their compilation into a staged prompt.
//!
//! A constraint spec is a sequence of `[constraint]` tables (see
//! [`crate::tables`]) with keys `id`, `target`, `directive` and an optional
//! `applies_to` list of query types. Compilation routes every constraint to
//! the stage that counters its failure mode, appends the dispatch profile's
//! extra directives, and emits one block per stage in a fixed order.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{HeuristicProfile, QueryType};
use crate::model::{FailureMode, IllusionQuery, ImageRef};
use crate::parser::ResponseGrammar;
use crate::tables::{self, Entry, SyntaxError, Table, Value};

/// Constraint spec shipped with the crate.
pub const DEFAULT_SPEC: &str = include_str!("../assets/default.constraints");

/// Prefix of the question line closing every rendered prompt.
pub const QUESTION_PREFIX: &str = "QUESTION: ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("no constraints defined")]
    NoConstraints,
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { name: String, line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: missing key {key:?}")]
    MissingKey { key: &'static str, line: usize },
    #[error("line {line}: key {key:?} expects a string, found {found}")]
    ExpectedString {
        key: String,
        found: &'static str,
        line: usize,
    },
    #[error("line {line}: constraint id is empty")]
    EmptyId { line: usize },
    #[error("line {line}: duplicate constraint id {id:?}")]
    DuplicateId { id: String, line: usize },
    #[error("line {line}: constraint {id:?} has an empty directive")]
    EmptyDirective { id: String, line: usize },
    #[error("line {line}: unknown failure mode {value:?}")]
    UnknownFailureMode { value: String, line: usize },
    #[error("line {line}: unknown query type {value:?}")]
    UnknownQueryType { value: String, line: usize },
}

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("failed to read constraint spec {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("stage {0} has no directives after filtering")]
    EmptyStage(Stage),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    id: String,
    target: FailureMode,
    directive: String,
    applies_to: Option<Vec<QueryType>>,
}

impl Constraint {
    pub fn new(
        id: impl Into<String>,
        target: FailureMode,
        directive: impl Into<String>,
        applies_to: Option<Vec<QueryType>>,
    ) -> Self {
        Self {
            id: id.into(),
            target,
            directive: directive.into(),
            applies_to,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn target(&self) -> FailureMode {
        self.target
    }

    pub fn directive(&self) -> &str {
        &self.directive
    }

    pub fn applies_to_list(&self) -> Option<&[QueryType]> {
        self.applies_to.as_deref()
    }

    /// True when the constraint has no applicability filter or lists `qt`.
    pub fn applies_to(&self, qt: QueryType) -> bool {
        self.applies_to.as_ref().is_none_or(|l| l.contains(&qt))
    }
}

/// A validated, ordered set of constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    /// Validates constraints built in code. Reported line numbers are 1-based
    /// positions in `constraints`.
    pub fn new(constraints: Vec<Constraint>) -> Result<Self, ValidationError> {
        let lines: Vec<usize> = (1..=constraints.len()).collect();
        validate(&constraints, &lines)?;
        Ok(Self { constraints })
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_SPEC).expect("bundled constraint spec is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConstraintError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConstraintError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(source: &str) -> Result<Self, ConstraintError> {
        let tables = tables::parse(source)?;
        let mut constraints = Vec::with_capacity(tables.len());
        let mut lines = Vec::with_capacity(tables.len());
        for table in &tables {
            constraints.push(constraint_from_table(table)?);
            lines.push(table.line);
        }
        validate(&constraints, &lines)?;
        Ok(Self { constraints })
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Writes the set back in spec syntax.
    pub fn to_spec_text(&self) -> String {
        let tables: Vec<Table> = self
            .constraints
            .iter()
            .map(|c| {
                let mut entries = vec![
                    entry("id", Value::Str(c.id.clone())),
                    entry("target", Value::Str(c.target.as_str().to_string())),
                    entry("directive", Value::Str(c.directive.clone())),
                ];
                if let Some(list) = &c.applies_to {
                    let joined = list
                        .iter()
                        .map(|q| q.as_str())
                        .collect::<Vec<_>>()
                        .join(", ");
                    entries.push(entry("applies_to", Value::Str(joined)));
                }
                Table {
                    name: "constraint".into(),
                    line: 0,
                    entries,
                }
            })
            .collect();
        tables::render(&tables)
    }
}

fn entry(key: &str, value: Value) -> Entry {
    Entry {
        key: key.to_string(),
        value,
        line: 0,
        column: 0,
    }
}

fn string_value(e: &Entry) -> Result<&str, ValidationError> {
    e.value
        .as_str()
        .ok_or_else(|| ValidationError::ExpectedString {
            key: e.key.clone(),
            found: e.value.type_name(),
            line: e.line,
        })
}

fn constraint_from_table(table: &Table) -> Result<Constraint, ValidationError> {
    if table.name != "constraint" {
        return Err(ValidationError::UnknownSection {
            name: table.name.clone(),
            line: table.line,
        });
    }
    let (mut id, mut target, mut directive, mut applies_to) = (None, None, None, None);
    for e in &table.entries {
        match e.key.as_str() {
            "id" => id = Some(string_value(e)?.to_string()),
            "target" => {
                let v = string_value(e)?;
                target = Some(FailureMode::parse(v.trim()).ok_or_else(|| {
                    ValidationError::UnknownFailureMode {
                        value: v.to_string(),
                        line: e.line,
                    }
                })?);
            }
            "directive" => directive = Some(string_value(e)?.to_string()),
            "applies_to" => {
                let v = string_value(e)?;
                let mut list = Vec::new();
                for part in v.split(',') {
                    let qt = QueryType::parse(part).ok_or_else(|| {
                        ValidationError::UnknownQueryType {
                            value: part.trim().to_string(),
                            line: e.line,
                        }
                    })?;
                    list.push(qt);
                }
                applies_to = Some(list);
            }
            other => {
                return Err(ValidationError::UnknownKey {
                    key: other.to_string(),
                    line: e.line,
                })
            }
        }
    }
    let missing = |key| ValidationError::MissingKey {
        key,
        line: table.line,
    };
    Ok(Constraint {
        id: id.ok_or_else(|| missing("id"))?,
        target: target.ok_or_else(|| missing("target"))?,
        directive: directive.ok_or_else(|| missing("directive"))?,
        applies_to,
    })
}

fn validate(constraints: &[Constraint], lines: &[usize]) -> Result<(), ValidationError> {
    if constraints.is_empty() {
        return Err(ValidationError::NoConstraints);
    }
    let mut seen = HashSet::new();
    for (c, &line) in constraints.iter().zip(lines) {
        if c.id.trim().is_empty() {
            return Err(ValidationError::EmptyId { line });
        }
        if !seen.insert(c.id.as_str()) {
            return Err(ValidationError::DuplicateId {
                id: c.id.clone(),
                line,
            });
        }
        if c.directive.trim().is_empty() {
            return Err(ValidationError::EmptyDirective {
                id: c.id.clone(),
                line,
            });
        }
    }
    Ok(())
}

/// Prompt stages, in the only order they are ever emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Axioms,
    Decomposition,
    Counterfactual,
    AnswerFormat,
}

impl Stage {
    pub const ORDER: [Stage; 4] = [
        Stage::Axioms,
        Stage::Decomposition,
        Stage::Counterfactual,
        Stage::AnswerFormat,
    ];

    /// The stage whose block carries constraints aimed at `mode`.
    pub fn for_failure_mode(mode: FailureMode) -> Stage {
        match mode {
            FailureMode::MetricHallucination => Stage::Axioms,
            FailureMode::BackgroundInterference => Stage::Decomposition,
            FailureMode::ConfirmationBias => Stage::Counterfactual,
        }
    }

    pub fn failure_mode(self) -> Option<FailureMode> {
        match self {
            Stage::Axioms => Some(FailureMode::MetricHallucination),
            Stage::Decomposition => Some(FailureMode::BackgroundInterference),
            Stage::Counterfactual => Some(FailureMode::ConfirmationBias),
            Stage::AnswerFormat => None,
        }
    }

    /// Header line opening the stage block in a rendered prompt.
    pub fn header(self) -> &'static str {
        match self {
            Stage::Axioms => "### STAGE 1: QUALITATIVE AXIOMS",
            Stage::Decomposition => "### STAGE 2: SCENE DECOMPOSITION",
            Stage::Counterfactual => "### STAGE 3: COUNTERFACTUAL SELF-VERIFICATION",
            Stage::AnswerFormat => "### STAGE 4: ANSWER FORMAT",
        }
    }

    fn lead(self) -> &'static str {
        match self {
            Stage::Axioms => "Follow these axioms for the whole analysis:",
            Stage::Decomposition => "Before judging, decompose the scene:",
            Stage::Counterfactual => "Then verify your judgment against the alternative:",
            Stage::AnswerFormat => "",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Axioms => "axioms",
            Stage::Decomposition => "decomposition",
            Stage::Counterfactual => "counterfactual",
            Stage::AnswerFormat => "answer-format",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub stage: Stage,
    pub text: String,
}

/// Compiled prompt blocks, exactly one per stage in [`Stage::ORDER`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintProtocol {
    query_type: QueryType,
    segments: Vec<Segment>,
    directives: Vec<(Stage, String)>,
}

impl ConstraintProtocol {
    pub fn query_type(&self) -> QueryType {
        self.query_type
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, stage: Stage) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.stage == stage)
            .expect("every stage is present")
    }

    /// Directives routed into each reasoning stage, in block order.
    pub fn directives(&self, stage: Stage) -> impl Iterator<Item = &str> {
        self.directives
            .iter()
            .filter(move |(s, _)| *s == stage)
            .map(|(_, d)| d.as_str())
    }
}

pub fn compile_protocol(
    cs: &ConstraintSet,
    profile: &HeuristicProfile,
) -> Result<ConstraintProtocol, CompileError> {
    compile_with_grammar(cs, profile, &ResponseGrammar::default())
}

pub fn compile_with_grammar(
    cs: &ConstraintSet,
    profile: &HeuristicProfile,
    grammar: &ResponseGrammar,
) -> Result<ConstraintProtocol, CompileError> {
    let mut directives: Vec<(Stage, String)> = Vec::new();
    let mut segments = Vec::with_capacity(4);
    for stage in Stage::ORDER {
        if stage == Stage::AnswerFormat {
            segments.push(Segment {
                stage,
                text: format!("{}\n{}", stage.header(), grammar.format_instructions()),
            });
            continue;
        }
        let mut items: Vec<&str> = cs
            .constraints()
            .iter()
            .filter(|c| Stage::for_failure_mode(c.target()) == stage && profile.keeps(c))
            .map(Constraint::directive)
            .collect();
        items.extend(
            profile
                .extra_directives
                .iter()
                .filter(|d| d.stage == stage)
                .map(|d| d.text.as_str()),
        );
        if items.is_empty() {
            return Err(CompileError::EmptyStage(stage));
        }
        let mut text = format!("{}\n{}", stage.header(), stage.lead());
        for item in &items {
            text.push_str("\n- ");
            text.push_str(&item.trim().replace('\n', "\n  "));
        }
        directives.extend(items.iter().map(|d| (stage, d.to_string())));
        segments.push(Segment { stage, text });
    }
    Ok(ConstraintProtocol {
        query_type: profile.query_type,
        segments,
        directives,
    })
}

pub const DEFAULT_SYSTEM_TEXT: &str = "You are a careful visual analyst. The attached image may be an optical illusion built so that appearance and reality disagree. Answer the question by working through the staged protocol in the user message.";

/// Where the compiled blocks are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptLayout {
    /// Moves the axioms block from the user text to the end of the system text.
    pub axioms_in_system: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptDocument {
    pub system_text: String,
    pub user_text: String,
    pub image: ImageRef,
}

impl PromptDocument {
    /// System and user text joined, in the order a model reads them.
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.user_text)
    }
}

pub fn render_prompt(protocol: &ConstraintProtocol, q: &IllusionQuery) -> PromptDocument {
    render_prompt_with(protocol, q, PromptLayout::default())
}

pub fn render_prompt_with(
    protocol: &ConstraintProtocol,
    q: &IllusionQuery,
    layout: PromptLayout,
) -> PromptDocument {
    let mut system_text = DEFAULT_SYSTEM_TEXT.to_string();
    let mut blocks = Vec::with_capacity(4);
    for seg in protocol.segments() {
        if layout.axioms_in_system && seg.stage == Stage::Axioms {
            system_text.push_str("\n\n");
            system_text.push_str(&seg.text);
        } else {
            blocks.push(seg.text.as_str());
        }
    }
    let user_text = format!(
        "{}\n\n{QUESTION_PREFIX}{}",
        blocks.join("\n\n"),
        q.question()
    );
    PromptDocument {
        system_text,
        user_text,
        image: q.image().clone(),
    }
}

/// Verbs that must not open an instruction clause in a directive.
pub const QUANTITATIVE_VERBS: [&str; 7] = [
    "measure",
    "count",
    "estimate",
    "calculate",
    "compute",
    "quantify",
    "enumerate",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LintFinding {
    pub id: String,
    pub verb: &'static str,
    pub clause: String,
}

/// Flags directives whose clauses open with a quantitative verb, i.e. that
/// instruct the model to produce numeric estimates. Prohibitions such as
/// "do not estimate" are not flagged.
pub fn lint_directive(id: &str, directive: &str) -> Vec<LintFinding> {
    let mut out = Vec::new();
    for clause in directive.split(['.', ';', ':', '!', '?', '\n', ',']) {
        let first = clause
            .split(|c: char| !c.is_alphanumeric())
            .find(|w| !w.is_empty())
            .map(str::to_lowercase);
        let Some(first) = first else { continue };
        let first = if first == "then" || first == "and" || first == "now" {
            clause
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .nth(1)
                .map(str::to_lowercase)
                .unwrap_or_default()
        } else {
            first
        };
        if let Some(verb) = QUANTITATIVE_VERBS.into_iter().find(|v| *v == first) {
            out.push(LintFinding {
                id: id.to_string(),
                verb,
                clause: clause.trim().to_string(),
            });
        }
    }
    out
}

pub fn lint_constraint_set(cs: &ConstraintSet) -> Vec<LintFinding> {
    cs.constraints()
        .iter()
        .flat_map(|c| lint_directive(c.id(), c.directive()))
        .collect()
}
