//! Run configuration: built-in defaults, overlaid by a config file, then the
//! environment, then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sqi_core::backend::{BackendKind, DEFAULT_API_KEY_ENV, ENDPOINT_ENV};
use sqi_core::constraints::PromptLayout;
use sqi_core::pipeline::{PipelineConfig, PipelineMode};
use sqi_core::tables;

/// Name of the file every run writes next to its outputs.
pub const EFFECTIVE_CONFIG_FILE: &str = "effective-config.json";

/// Section name used in table-syntax config files.
pub const CONFIG_SECTION: &str = "sqi";

/// `http` or `scripted:<table.json>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Http,
    Scripted(PathBuf),
}

impl BackendSpec {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendSpec::Http => BackendKind::Http,
            BackendSpec::Scripted(_) => BackendKind::Scripted,
        }
    }
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "http" => Ok(BackendSpec::Http),
            Some(("scripted", path)) if !path.is_empty() => {
                Ok(BackendSpec::Scripted(PathBuf::from(path)))
            }
            _ => Err(format!(
                "unknown backend {s:?}; expected `http` or `scripted:<table.json>`"
            )),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Http => f.write_str("http"),
            BackendSpec::Scripted(p) => write!(f, "scripted:{}", p.display()),
        }
    }
}

impl Serialize for BackendSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// No cache layer.
    #[default]
    Off,
    /// Serve hits from the cache, record misses.
    Record,
    /// Serve only from the cache; a miss is an error.
    Replay,
}

/// Every setting a command can use, after merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSpec,
    pub endpoint: Option<String>,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_transport_retries: u32,
    pub constraints: Option<PathBuf>,
    pub dispatch_rules: Option<PathBuf>,
    pub mode: PipelineMode,
    pub max_parse_retries: u8,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub axioms_in_system: bool,
    pub fallback_window: usize,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    pub cache_mode: CacheMode,
    pub out: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    pub show_trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        Self {
            backend: BackendSpec::Http,
            endpoint: None,
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 120,
            max_transport_retries: 3,
            constraints: None,
            dispatch_rules: None,
            mode: pipeline.mode,
            max_parse_retries: pipeline.max_parse_retries,
            temperature: pipeline.temperature,
            seed: pipeline.seed,
            axioms_in_system: pipeline.layout.axioms_in_system,
            fallback_window: pipeline.fallback_window,
            concurrency: 4,
            cache_dir: None,
            cache_mode: CacheMode::Off,
            out: None,
            trace_dir: None,
            show_trace: false,
        }
    }
}

/// A partial configuration; `None` leaves the lower layer's value in place.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub backend: Option<BackendSpec>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_transport_retries: Option<u32>,
    pub constraints: Option<PathBuf>,
    pub dispatch_rules: Option<PathBuf>,
    pub mode: Option<PipelineMode>,
    pub max_parse_retries: Option<u8>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub axioms_in_system: Option<bool>,
    pub fallback_window: Option<usize>,
    pub concurrency: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub cache_mode: Option<CacheMode>,
    pub out: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    pub show_trace: Option<bool>,
}

impl ConfigLayer {
    /// Reads a config file: JSON (such as an echoed `effective-config.json`)
    /// when it starts with `{`, otherwise the table syntax with a single
    /// `[sqi]` section.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("in config file {}", path.display()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return Ok(serde_json::from_str(text)?);
        }
        let parsed = tables::parse(text)?;
        let mut map = serde_json::Map::new();
        for table in &parsed {
            if table.name != CONFIG_SECTION {
                bail!("line {}: unknown section [{}]", table.line, table.name);
            }
            for entry in &table.entries {
                let value = match &entry.value {
                    tables::Value::Str(s) => serde_json::Value::from(s.as_str()),
                    tables::Value::Int(i) => serde_json::Value::from(*i),
                    tables::Value::Float(x) => serde_json::Value::from(*x),
                    tables::Value::Bool(b) => serde_json::Value::from(*b),
                };
                if map.insert(entry.key.clone(), value).is_some() {
                    bail!("line {}: duplicate key `{}`", entry.line, entry.key);
                }
            }
        }
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| anyhow!(e))
    }

    /// The environment layer: only the endpoint is read from the environment
    /// (the API key is read by the backend itself and never stored).
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Self {
        Self {
            endpoint: lookup(ENDPOINT_ENV).filter(|v| !v.is_empty()),
            ..Self::default()
        }
    }
}

impl RunConfig {
    pub fn apply(&mut self, layer: ConfigLayer) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = layer.$field { self.$field = v; }
            )*};
        }
        macro_rules! set_opt {
            ($($field:ident),*) => {$(
                if layer.$field.is_some() { self.$field = layer.$field; }
            )*};
        }
        set!(
            backend,
            model,
            api_key_env,
            timeout_secs,
            max_transport_retries,
            mode,
            max_parse_retries,
            temperature,
            axioms_in_system,
            fallback_window,
            concurrency,
            cache_mode,
            show_trace
        );
        set_opt!(
            endpoint,
            constraints,
            dispatch_rules,
            seed,
            cache_dir,
            out,
            trace_dir
        );
    }

    /// Merges `defaults < file < env < flags`.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        flags: ConfigLayer,
    ) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(path) = file {
            config.apply(ConfigLayer::from_file(path)?);
        }
        config.apply(ConfigLayer::from_env(env));
        config.apply(flags);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        if self.cache_mode != CacheMode::Off && self.cache_dir.is_none() {
            bail!("--record and --replay need --cache-dir");
        }
        self.pipeline().validate()?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mode: self.mode,
            max_parse_retries: self.max_parse_retries,
            temperature: self.temperature,
            seed: self.seed,
            layout: PromptLayout {
                axioms_in_system: self.axioms_in_system,
            },
            fallback_window: self.fallback_window,
            ..PipelineConfig::default()
        }
    }

    /// Model name used for requests and cache keys.
    pub fn model_name(&self) -> &str {
        match (&self.backend, self.model.is_empty()) {
            (BackendSpec::Scripted(_), true) => "scripted",
            _ => &self.model,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes `effective-config.json` into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }
}
