//! End-to-end inference for one query: dispatch, compile, render, call the
//! backend, parse. Single-pass mode fuses every stage into one prompt;
//! multi-turn mode spreads them over three exchanges.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatRequest};
use crate::constraints::{
    compile_with_grammar, render_prompt_with, CompileError, ConstraintProtocol, ConstraintSet,
    PromptDocument, PromptLayout, Stage, DEFAULT_SYSTEM_TEXT, QUESTION_PREFIX,
};
use crate::dispatch::{heuristic_profile, QueryType, RuleTable};
use crate::model::{IllusionQuery, ParseStatus, ReasoningTrace, Verdict};
use crate::parser::{self, ResponseGrammar, COUNTERFACTUAL, DECOMPOSITION, FINAL, INITIAL};

pub const MAX_PARSE_RETRIES: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    #[default]
    SinglePass,
    MultiTurn,
}

impl PipelineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::SinglePass => "single-pass",
            PipelineMode::MultiTurn => "multi-turn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s
            .trim()
            .to_ascii_lowercase()
            .replace(['_', '-'], "")
            .as_str()
        {
            "singlepass" | "single" => Some(PipelineMode::SinglePass),
            "multiturn" | "multi" => Some(PipelineMode::MultiTurn),
            _ => None,
        }
    }

    /// Exchanges per attempt round.
    pub fn turns(self) -> u32 {
        match self {
            PipelineMode::SinglePass => 1,
            PipelineMode::MultiTurn => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub max_parse_retries: u8,
    pub backend_id: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub layout: PromptLayout,
    pub fallback_window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::SinglePass,
            max_parse_retries: 1,
            backend_id: String::new(),
            temperature: 0.0,
            seed: None,
            layout: PromptLayout::default(),
            fallback_window: parser::DEFAULT_FALLBACK_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("max_parse_retries must be at most {MAX_PARSE_RETRIES}, got {0}")]
    TooManyRetries(u8),
    #[error("temperature must be a finite number >= 0, got {0}")]
    BadTemperature(String),
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_parse_retries > MAX_PARSE_RETRIES {
            return Err(ConfigError::TooManyRetries(self.max_parse_retries));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ConfigError::BadTemperature(self.temperature.to_string()));
        }
        Ok(())
    }

    pub fn grammar(&self) -> ResponseGrammar {
        ResponseGrammar {
            fallback_window: self.fallback_window,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineErrorKind {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
#[error("item {item_id}")]
pub struct PipelineError {
    pub item_id: String,
    #[source]
    pub kind: PipelineErrorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineResult {
    #[serde(skip)]
    pub query: IllusionQuery,
    pub item_id: String,
    pub query_type: QueryType,
    pub trace: ReasoningTrace,
    pub verdict: Verdict,
    pub backend_calls: u32,
    /// True when every backend response came from the cache.
    pub cache_hit: bool,
}

/// A configured pipeline: constraint set, dispatch rules and settings.
#[derive(Debug, Clone)]
pub struct Pipeline {
    constraints: ConstraintSet,
    rules: RuleTable,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(
        constraints: ConstraintSet,
        rules: RuleTable,
        config: PipelineConfig,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            constraints,
            rules,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn classify(&self, q: &IllusionQuery) -> QueryType {
        self.rules.classify(q.question())
    }

    pub fn protocol(&self, qt: QueryType) -> Result<ConstraintProtocol, CompileError> {
        compile_with_grammar(
            &self.constraints,
            &heuristic_profile(qt),
            &self.config.grammar(),
        )
    }

    /// The single-pass prompt for `q`, as it would be sent on the first attempt.
    pub fn prompt(&self, q: &IllusionQuery) -> Result<PromptDocument, CompileError> {
        let protocol = self.protocol(self.classify(q))?;
        Ok(render_prompt_with(&protocol, q, self.config.layout))
    }

    pub fn run(
        &self,
        q: &IllusionQuery,
        backend: &dyn ChatBackend,
    ) -> Result<PipelineResult, PipelineError> {
        let wrap = |kind: PipelineErrorKind| PipelineError {
            item_id: q.item_id().to_string(),
            kind,
        };
        let query_type = self.classify(q);
        let protocol = self.protocol(query_type).map_err(|e| wrap(e.into()))?;
        let mut exchange = Exchange::new(backend, &self.config, q);
        let trace = match self.config.mode {
            PipelineMode::SinglePass => self.single_pass(&protocol, q, &mut exchange),
            PipelineMode::MultiTurn => self.multi_turn(&protocol, q, &mut exchange),
        }
        .map_err(|e| wrap(e.into()))?;
        Ok(PipelineResult {
            query: q.clone(),
            item_id: q.item_id().to_string(),
            query_type,
            verdict: trace.final_verdict,
            trace,
            backend_calls: exchange.calls,
            cache_hit: exchange.all_cached,
        })
    }

    fn single_pass(
        &self,
        protocol: &ConstraintProtocol,
        q: &IllusionQuery,
        exchange: &mut Exchange<'_>,
    ) -> Result<ReasoningTrace, BackendError> {
        let grammar = self.config.grammar();
        let doc = render_prompt_with(protocol, q, self.config.layout);
        let mut trace = None;
        for attempt in 0..=self.config.max_parse_retries {
            let mut user_text = doc.user_text.clone();
            if attempt > 0 {
                user_text.push_str("\n\n");
                user_text.push_str(&grammar.format_reminder());
            }
            let text = exchange.send(&doc.system_text, user_text)?;
            let parsed = grammar.parse(&text);
            let done = parsed.parse_status() != ParseStatus::Unparseable;
            trace = Some(parsed);
            if done {
                break;
            }
        }
        Ok(trace.expect("at least one attempt"))
    }

    fn multi_turn(
        &self,
        protocol: &ConstraintProtocol,
        q: &IllusionQuery,
        exchange: &mut Exchange<'_>,
    ) -> Result<ReasoningTrace, BackendError> {
        let grammar = self.config.grammar();
        let mut system_text = DEFAULT_SYSTEM_TEXT.to_string();
        let axioms = &protocol.segment(Stage::Axioms).text;
        let mut opening = Vec::new();
        if self.config.layout.axioms_in_system {
            system_text.push_str("\n\n");
            system_text.push_str(axioms);
        } else {
            opening.push(axioms.as_str());
        }
        opening.push(&protocol.segment(Stage::Decomposition).text);

        let turns: [(String, &[&str]); 3] = [
            (
                format!(
                    "TURN 1 OF 3\n\n{}\n\n{QUESTION_PREFIX}{}",
                    opening.join("\n\n"),
                    q.question()
                ),
                &[DECOMPOSITION],
            ),
            (
                "TURN 2 OF 3\n\nBased on your decomposition, state your initial qualitative judgment on the question.".to_string(),
                &[INITIAL],
            ),
            (
                format!(
                    "TURN 3 OF 3\n\n{}\n\nThen commit to a final answer.",
                    protocol.segment(Stage::Counterfactual).text
                ),
                &[COUNTERFACTUAL, FINAL],
            ),
        ];

        let mut transcript = String::new();
        let mut sections = Vec::with_capacity(3);
        let mut replies = Vec::with_capacity(3);
        for (i, (instruction, markers)) in turns.iter().enumerate() {
            let base = format!(
                "{transcript}{instruction}\n\n{}",
                grammar.section_instructions(markers)
            );
            let mut reply = String::new();
            for attempt in 0..=self.config.max_parse_retries {
                let mut user_text = base.clone();
                if attempt > 0 {
                    user_text.push_str(&format!(
                        "\n\nFORMAT REMINDER: the previous reply could not be read. {}",
                        grammar.section_instructions(markers)
                    ));
                }
                reply = exchange.send(&system_text, user_text)?;
                if turn_is_valid(&reply, markers) {
                    break;
                }
            }
            transcript.push_str(&format!("{instruction}\n\nREPLY {}:\n{reply}\n\n", i + 1));
            // A readable turn contributes only the sections it was asked for,
            // so a model that answers every turn in the full format still
            // assembles into one clean trace.
            let contribution = if turn_is_valid(&reply, markers) {
                markers
                    .iter()
                    .map(|m| format!("{m} {}", section_body(&reply, m).unwrap_or_default()))
                    .collect::<Vec<_>>()
                    .join("\n")
            } else {
                reply.clone()
            };
            sections.push(contribution);
            replies.push(reply);
        }
        let mut trace = grammar.parse(&sections.join("\n"));
        trace.raw = replies.join("\n");
        Ok(trace)
    }

    /// Runs every query with at most `concurrency` in flight. Results are
    /// ordered by item id.
    pub fn run_batch(
        &self,
        queries: &[IllusionQuery],
        backend: &dyn ChatBackend,
        concurrency: usize,
    ) -> Vec<Result<PipelineResult, PipelineError>> {
        let workers = concurrency.max(1).min(queries.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<PipelineResult, PipelineError>>>> =
            Mutex::new((0..queries.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(q) = queries.get(i) else { break };
                    let result = self.run(q, backend);
                    slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(result);
                });
            }
        });
        let mut results: Vec<_> = slots
            .into_inner()
            .unwrap_or_else(|p| p.into_inner())
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect();
        results.sort_by(|a, b| result_id(a).cmp(result_id(b)));
        results
    }
}

fn result_id(r: &Result<PipelineResult, PipelineError>) -> &str {
    match r {
        Ok(r) => &r.item_id,
        Err(e) => &e.item_id,
    }
}

fn turn_is_valid(reply: &str, markers: &[&str]) -> bool {
    markers.iter().all(|m| match section_body(reply, m) {
        Some(body) if *m == FINAL => parser::answer_token(body).is_some(),
        Some(body) => !body.is_empty(),
        None => false,
    })
}

fn section_body<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let start = text.find(marker)? + marker.len();
    let rest = &text[start..];
    let end = parser::MARKERS
        .iter()
        .filter_map(|m| rest.find(m))
        .min()
        .unwrap_or(rest.len());
    Some(rest[..end].trim())
}

struct Exchange<'a> {
    backend: &'a dyn ChatBackend,
    config: &'a PipelineConfig,
    image: &'a crate::model::ImageRef,
    calls: u32,
    all_cached: bool,
}

impl<'a> Exchange<'a> {
    fn new(backend: &'a dyn ChatBackend, config: &'a PipelineConfig, q: &'a IllusionQuery) -> Self {
        Self {
            backend,
            config,
            image: q.image(),
            calls: 0,
            all_cached: true,
        }
    }

    fn send(&mut self, system_text: &str, user_text: String) -> Result<String, BackendError> {
        let request = ChatRequest {
            system_text: system_text.to_string(),
            user_text,
            image: Some(self.image.clone()),
            temperature: self.config.temperature,
            seed: self.config.seed,
            model_name: self.backend.source().1.to_string(),
        };
        self.calls += 1;
        let completion = self.backend.complete(&request)?;
        self.all_cached &= completion.cached;
        Ok(completion.text)
    }
}

/// Free-standing form of [`Pipeline::run`] with the bundled dispatch rules.
pub fn run_sqi(
    q: &IllusionQuery,
    cs: &ConstraintSet,
    cfg: &PipelineConfig,
    backend: &dyn ChatBackend,
) -> Result<PipelineResult, PipelineError> {
    let pipeline = Pipeline::new(cs.clone(), RuleTable::default(), cfg.clone()).map_err(|e| {
        PipelineError {
            item_id: q.item_id().to_string(),
            kind: e.into(),
        }
    })?;
    pipeline.run(q, backend)
}

/// Multi-turn variant of [`run_sqi`]; forces the mode regardless of `cfg`.
pub fn run_sqi_multiturn(
    q: &IllusionQuery,
    cs: &ConstraintSet,
    cfg: &PipelineConfig,
    backend: &dyn ChatBackend,
) -> Result<PipelineResult, PipelineError> {
    let cfg = PipelineConfig {
        mode: PipelineMode::MultiTurn,
        ..cfg.clone()
    };
    run_sqi(q, cs, &cfg, backend)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    item_id: &'a str,
    query_type: QueryType,
    backend_calls: u32,
    cache_hit: bool,
    verdict: &'a Verdict,
    trace: &'a ReasoningTrace,
}

/// Writes `traces.jsonl` (one object per item, in the given order) to `dir`.
pub fn write_trace_log(dir: &Path, results: &[PipelineResult]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut file = std::io::BufWriter::new(fs::File::create(dir.join("traces.jsonl"))?);
    for r in results {
        let line = TraceLine {
            item_id: &r.item_id,
            query_type: r.query_type,
            backend_calls: r.backend_calls,
            cache_hit: r.cache_hit,
            verdict: &r.verdict,
            trace: &r.trace,
        };
        serde_json::to_writer(&mut file, &line)?;
        file.write_all(b"\n")?;
    }
    file.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.max_parse_retries = 4;
        assert_eq!(cfg.validate(), Err(ConfigError::TooManyRetries(4)));
        cfg.max_parse_retries = 3;
        cfg.temperature = -0.1;
        assert!(cfg.validate().is_err());
        cfg.temperature = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_names() {
        assert_eq!(
            PipelineMode::parse("multiturn"),
            Some(PipelineMode::MultiTurn)
        );
        assert_eq!(
            PipelineMode::parse("single-pass"),
            Some(PipelineMode::SinglePass)
        );
        assert_eq!(PipelineMode::parse("both"), None);
    }

    #[test]
    fn turn_validation() {
        assert!(turn_is_valid("DECOMPOSITION: x", &[DECOMPOSITION]));
        assert!(!turn_is_valid("DECOMPOSITION:", &[DECOMPOSITION]));
        assert!(turn_is_valid(
            "COUNTERFACTUAL: c\nFINAL: no.",
            &[COUNTERFACTUAL, FINAL]
        ));
        assert!(!turn_is_valid(
            "COUNTERFACTUAL: c\nFINAL: probably",
            &[COUNTERFACTUAL, FINAL]
        ));
    }
}
