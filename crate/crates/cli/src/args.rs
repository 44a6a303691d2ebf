//! Command-line surface. Every flag is global so that `sqi --help` lists all
//! of them.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sqi_core::pipeline::PipelineMode;

use crate::config::{BackendSpec, CacheMode, ConfigLayer};

#[derive(Debug, Parser)]
#[command(
    name = "sqi",
    version,
    about = "Structured qualitative inference for vision-language model endpoints",
    after_help = "Environment:\n  SQI_API_KEY    bearer token for the http backend (name configurable with --api-key-env)\n  SQI_ENDPOINT   endpoint URL, overridden by --endpoint\n\nPrecedence: flags > environment > --config file > built-in defaults.\n\nExit codes: 0 answered, 2 unreadable answer (ask only), 1 error."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ask one question about one image and print the final verdict.
    Ask {
        /// Image file (PNG, JPEG or WebP).
        image: PathBuf,
        /// Yes/no question about the image.
        question: String,
    },
    /// Run a JSON-lines manifest and write report.json, report.csv and summary.txt.
    Eval {
        /// Manifest file; image paths are relative to its directory.
        manifest: PathBuf,
    },
    /// Inspect or maintain the response cache given by --cache-dir.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum CacheAction {
    /// List cached keys.
    Ls,
    /// Recompute digests and report damaged entries.
    Verify,
    /// Remove entries the journal does not reference.
    Gc,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file: `[sqi]` table syntax, or JSON such as an echoed effective-config.json.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Model backend: `http` or `scripted:<table.json>`.
    #[arg(long, global = true, value_name = "SPEC")]
    pub backend: Option<BackendSpec>,

    /// Chat-completions base URL for the http backend (also SQI_ENDPOINT).
    #[arg(long, global = true, value_name = "URL")]
    pub endpoint: Option<String>,

    /// Model name sent to the endpoint and used in cache keys.
    #[arg(long, global = true, value_name = "NAME")]
    pub model: Option<String>,

    /// Environment variable holding the API key.
    #[arg(long, global = true, value_name = "VAR")]
    pub api_key_env: Option<String>,

    /// Per-request timeout in seconds.
    #[arg(long, global = true, value_name = "SECS")]
    pub timeout: Option<u64>,

    /// Transport retries per request (5xx, 408, 429 and network errors).
    #[arg(long, global = true, value_name = "N")]
    pub transport_retries: Option<u32>,

    /// Constraint spec file replacing the bundled one.
    #[arg(long, global = true, value_name = "PATH")]
    pub constraints: Option<PathBuf>,

    /// Keyword dispatch rule file replacing the bundled one.
    #[arg(long, global = true, value_name = "PATH")]
    pub dispatch_rules: Option<PathBuf>,

    /// Pipeline mode: single-pass or multi-turn.
    #[arg(long, global = true, value_name = "MODE", value_parser = parse_mode)]
    pub mode: Option<PipelineMode>,

    /// Re-asks after an unreadable reply (0-3).
    #[arg(long, global = true, value_name = "N")]
    pub parse_retries: Option<u8>,

    /// Sampling temperature sent to the model.
    #[arg(long, global = true, value_name = "T")]
    pub temperature: Option<f64>,

    /// Sampling seed sent to the model.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Put the axioms block in the system message instead of the user message.
    #[arg(long, global = true)]
    pub axioms_in_system: bool,

    /// Characters at the end of a reply searched for a fallback yes/no.
    #[arg(long, global = true, value_name = "CHARS")]
    pub fallback_window: Option<usize>,

    /// Maximum requests in flight.
    #[arg(long, global = true, value_name = "N")]
    pub concurrency: Option<usize>,

    /// Response cache directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,

    /// Serve from the cache and record misses.
    #[arg(long, global = true, conflicts_with = "replay")]
    pub record: bool,

    /// Serve only from the cache; never contact the model.
    #[arg(long, global = true)]
    pub replay: bool,

    /// Output directory for reports and effective-config.json.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Directory for traces.jsonl.
    #[arg(long, global = true, value_name = "DIR")]
    pub trace_dir: Option<PathBuf>,

    /// Print the four trace sections before the verdict.
    #[arg(long, global = true)]
    pub show_trace: bool,
}

fn parse_mode(s: &str) -> Result<PipelineMode, String> {
    PipelineMode::parse(s)
        .ok_or_else(|| format!("unknown mode {s:?}; expected single-pass or multi-turn"))
}

impl GlobalArgs {
    /// The flag layer of the configuration; unset flags leave lower layers alone.
    pub fn layer(&self) -> ConfigLayer {
        let cache_mode = match (self.record, self.replay) {
            (true, _) => Some(CacheMode::Record),
            (_, true) => Some(CacheMode::Replay),
            _ => None,
        };
        ConfigLayer {
            backend: self.backend.clone(),
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            api_key_env: self.api_key_env.clone(),
            timeout_secs: self.timeout,
            max_transport_retries: self.transport_retries,
            constraints: self.constraints.clone(),
            dispatch_rules: self.dispatch_rules.clone(),
            mode: self.mode,
            max_parse_retries: self.parse_retries,
            temperature: self.temperature,
            seed: self.seed,
            axioms_in_system: self.axioms_in_system.then_some(true),
            fallback_window: self.fallback_window,
            concurrency: self.concurrency,
            cache_dir: self.cache_dir.clone(),
            cache_mode,
            out: self.out.clone(),
            trace_dir: self.trace_dir.clone(),
            show_trace: self.show_trace.then_some(true),
        }
    }
}
