use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use sqi_core::backend::{
    BackendConfig, BackendHandle, RecordingBackend, ReplayBackend, ResponseCache,
};
use sqi_core::dispatch::RuleTable;
use sqi_core::eval::{load_manifest, run_eval};
use sqi_core::model::{IllusionQuery, ImageRef, ParseStatus};
use sqi_core::pipeline::{write_trace_log, Pipeline};
use sqi_core::ConstraintSet;

use crate::args::CacheAction;
use crate::config::{BackendSpec, CacheMode, RunConfig};

/// Output directory used by `eval` when `--out` is not given.
pub const DEFAULT_OUT_DIR: &str = "sqi-out";

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const ERROR: u8 = 1;
    pub const UNPARSEABLE: u8 = 2;
}

pub fn build_pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    let constraints = match &cfg.constraints {
        Some(path) => ConstraintSet::load(path)
            .with_context(|| format!("loading constraints from {}", path.display()))?,
        None => ConstraintSet::bundled(),
    };
    let rules = match &cfg.dispatch_rules {
        Some(path) => RuleTable::load(path)
            .with_context(|| format!("loading dispatch rules from {}", path.display()))?,
        None => RuleTable::default(),
    };
    Ok(Pipeline::new(constraints, rules, cfg.pipeline())?)
}

/// Builds the configured backend, wrapped in the cache layer when recording.
/// Replay never constructs the underlying backend.
pub fn build_backend(cfg: &RunConfig) -> Result<BackendHandle> {
    let cache_dir = || {
        cfg.cache_dir
            .clone()
            .expect("validated: cache modes need a directory")
    };
    match cfg.cache_mode {
        CacheMode::Replay => {
            let dir = cache_dir();
            let cache = ResponseCache::open(&dir)
                .with_context(|| format!("opening replay cache {}", dir.display()))?;
            return Ok(Arc::new(ReplayBackend::new(
                Arc::new(cache),
                cfg.backend.kind(),
                cfg.model_name(),
            )));
        }
        CacheMode::Record | CacheMode::Off => {}
    }
    let backend_config = BackendConfig {
        kind: cfg.backend.kind(),
        endpoint: cfg.endpoint.clone(),
        model_name: cfg.model_name().to_string(),
        api_key_env: cfg.api_key_env.clone(),
        timeout_secs: cfg.timeout_secs,
        max_transport_retries: cfg.max_transport_retries,
        script: match &cfg.backend {
            BackendSpec::Scripted(path) => Some(path.clone()),
            BackendSpec::Http => None,
        },
        cache_dir: cfg.cache_dir.clone(),
    };
    let inner = backend_config.build()?;
    if cfg.cache_mode == CacheMode::Record {
        let dir = cache_dir();
        let cache = ResponseCache::create(&dir)
            .with_context(|| format!("creating cache {}", dir.display()))?;
        return Ok(Arc::new(RecordingBackend::new(inner, Arc::new(cache))));
    }
    Ok(inner)
}

pub fn ask(cfg: &RunConfig, image: &Path, question: &str, out: &mut dyn Write) -> Result<u8> {
    let image_ref = ImageRef::from_path(image)?;
    let query = IllusionQuery::new("ask", image_ref, question, None)?;
    let pipeline = build_pipeline(cfg)?;
    let backend = build_backend(cfg)?;
    let result = pipeline.run(&query, backend.as_ref())?;

    if let Some(dir) = &cfg.out {
        cfg.echo_into(dir)?;
    }
    if let Some(dir) = &cfg.trace_dir {
        write_trace_log(dir, std::slice::from_ref(&result))
            .with_context(|| format!("writing traces to {}", dir.display()))?;
    }
    if cfg.show_trace {
        let t = &result.trace;
        writeln!(out, "QUERY TYPE: {}", result.query_type.as_str())?;
        writeln!(out, "DECOMPOSITION: {}", t.decomposition)?;
        writeln!(out, "INITIAL: {}", t.initial_judgment)?;
        writeln!(out, "COUNTERFACTUAL: {}", t.counterfactual)?;
    }
    match (result.verdict.answer(), result.verdict.parse_status()) {
        (Some(answer), status) => {
            writeln!(out, "FINAL: {}", answer.token())?;
            if status == ParseStatus::Recovered {
                eprintln!("note: the reply was off-format; the answer was recovered from its last sentences");
            }
            Ok(exit::OK)
        }
        (None, _) => {
            writeln!(out, "FINAL: UNPARSEABLE")?;
            eprintln!(
                "the model's reply could not be read after {} attempt(s)",
                result.backend_calls
            );
            Ok(exit::UNPARSEABLE)
        }
    }
}

pub fn eval(cfg: &RunConfig, manifest_path: &Path, out: &mut dyn Write) -> Result<u8> {
    let manifest = load_manifest(manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    let pipeline = build_pipeline(cfg)?;
    let backend = build_backend(cfg)?;
    let (report, results) = run_eval(&manifest, &pipeline, backend.as_ref(), cfg.concurrency)?;

    let out_dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    report
        .write_to(&out_dir)
        .with_context(|| format!("writing report to {}", out_dir.display()))?;
    cfg.echo_into(&out_dir)?;
    if let Some(dir) = &cfg.trace_dir {
        write_trace_log(dir, &results)
            .with_context(|| format!("writing traces to {}", dir.display()))?;
    }
    writeln!(
        out,
        "{} items ({} unparseable), report in {}",
        report.metadata.n_items,
        report.counts.n_unparseable,
        out_dir.display()
    )?;
    writeln!(out, "{}", report.summary_line())?;
    Ok(exit::OK)
}

pub fn cache(cfg: &RunConfig, action: CacheAction, out: &mut dyn Write) -> Result<u8> {
    let Some(dir) = &cfg.cache_dir else {
        bail!("cache commands need --cache-dir");
    };
    let cache =
        ResponseCache::open(dir).with_context(|| format!("opening cache {}", dir.display()))?;
    match action {
        CacheAction::Ls => {
            for key in cache.keys()? {
                writeln!(out, "{key}")?;
            }
            Ok(exit::OK)
        }
        CacheAction::Verify => {
            let report = cache.verify()?;
            if report.is_ok() {
                writeln!(out, "ok, {} entries", report.entries)?;
                return Ok(exit::OK);
            }
            for (key, reason) in &report.bad {
                writeln!(out, "bad entry {key}: {reason}")?;
            }
            writeln!(
                out,
                "{} of {} entries damaged",
                report.bad.len(),
                report.entries
            )?;
            Ok(exit::ERROR)
        }
        CacheAction::Gc => {
            writeln!(out, "removed {}", cache.gc()?)?;
            Ok(exit::OK)
        }
    }
}
