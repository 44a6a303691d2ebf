//! Structured qualitative inference for frozen vision-language models.
//!
//! The crate wraps a chat-completions style model endpoint and restructures
//! each query into one staged prompt: qualitative axioms that forbid metric
//! estimation, a scene decomposition that separates targets from background,
//! and a counterfactual check before the final yes/no answer. Around that
//! sit the keyword dispatcher that specializes the prompt per query type, the
//! response parser, a record/replay cache, and the two-subset accuracy
//! harness.
//!
//! ```no_run
//! use sqi_core::backend::{ScriptTable, ScriptedBackend};
//! use sqi_core::constraints::ConstraintSet;
//! use sqi_core::model::{IllusionQuery, ImageRef};
//! use sqi_core::pipeline::{run_sqi, PipelineConfig};
//!
//! let image = ImageRef::from_path("fixtures/poggendorff.png").unwrap();
//! let q = IllusionQuery::new("demo", image, "Are the segments aligned?", None).unwrap();
//! let backend = ScriptedBackend::new(ScriptTable::wildcard("FINAL: YES"), "scripted");
//! let result = run_sqi(&q, &ConstraintSet::bundled(), &PipelineConfig::default(), &backend).unwrap();
//! println!("{:?}", result.verdict.answer());
//! ```

pub mod backend;
pub mod constraints;
pub mod dispatch;
pub mod eval;
pub mod model;
pub mod parser;
pub mod pipeline;
pub mod tables;

pub use constraints::{compile_protocol, render_prompt, ConstraintProtocol, ConstraintSet};
pub use dispatch::{classify_query, heuristic_profile, HeuristicProfile, QueryType};
pub use eval::{load_manifest, overall_accuracy, subset_accuracy, EvalReport, Manifest};
pub use model::{
    verdict_from_label, Answer, FailureMode, GtLabel, IllusionQuery, ParseStatus, ReasoningTrace,
    Verdict,
};
pub use parser::{parse_response, render_trace};
pub use pipeline::{run_sqi, run_sqi_multiturn, Pipeline, PipelineConfig, PipelineMode};
