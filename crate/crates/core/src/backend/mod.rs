//! The frozen model behind a uniform completion interface.
//!
//! Three implementations exist: [`HttpBackend`] speaks the chat-completions
//! wire format, [`ScriptedBackend`] answers from a fixed table, and the cache
//! pair [`RecordingBackend`] / [`ReplayBackend`] persists and serves responses
//! by content address.

mod cache;
mod http;
mod scripted;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ImageRef;

pub use cache::{
    CacheEntry, JournalRecord, RecordingBackend, ReplayBackend, ResponseCache, VerifyReport,
};
pub use http::{Backoff, HttpBackend};
pub use scripted::{ScriptTable, ScriptedBackend};

/// Default environment variable holding the bearer token.
pub const DEFAULT_API_KEY_ENV: &str = "SQI_API_KEY";
/// Environment variable overriding the configured endpoint.
pub const ENDPOINT_ENV: &str = "SQI_ENDPOINT";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited on all {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no cached response for key {key}")]
    CacheMiss { key: String },
    #[error("no scripted response matches the request")]
    NoScriptedResponse,
    #[error("cache i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
    Replay,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Http => "http",
            BackendKind::Scripted => "scripted",
            BackendKind::Replay => "replay",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One request to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub image: Option<ImageRef>,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub model_name: String,
}

// Field order is alphabetical and fixed; the serialized form is the canonical
// request text that cache keys are derived from.
#[derive(Serialize)]
struct CanonicalRequest<'a> {
    image: Option<CanonicalImage>,
    model: &'a str,
    seed: Option<u64>,
    system: &'a str,
    temperature: String,
    user: &'a str,
}

#[derive(Serialize)]
struct CanonicalImage {
    media_type: &'static str,
    sha256: String,
}

impl ChatRequest {
    /// Stable textual form: sorted keys, no whitespace, temperature as the
    /// shortest round-tripping decimal, image replaced by its digest.
    pub fn canonical(&self) -> String {
        let canonical = CanonicalRequest {
            image: self.image.as_ref().map(|img| CanonicalImage {
                media_type: img.media_type().mime(),
                sha256: img.digest(),
            }),
            model: &self.model_name,
            seed: self.seed,
            system: &self.system_text,
            temperature: format!("{:?}", self.temperature),
            user: &self.user_text,
        };
        serde_json::to_string(&canonical).expect("canonical request serializes")
    }
}

/// Content address of a request as served by a given backend and model.
pub fn cache_key(request: &ChatRequest, kind: BackendKind, model_name: &str) -> String {
    key_from_canonical(&request.canonical(), kind, model_name)
}

pub fn key_from_canonical(canonical: &str, kind: BackendKind, model_name: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hasher.update([0u8]);
    hasher.update(kind.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(model_name.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// True when the text came from the response cache rather than the model.
    pub cached: bool,
    pub usage: Option<TokenUsage>,
}

impl Completion {
    pub fn fresh(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            cached: false,
            usage: None,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn model_name(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError>;

    /// Kind and model that cache keys are computed for. Cache layers report
    /// the wrapped backend.
    fn source(&self) -> (BackendKind, &str) {
        (self.kind(), self.model_name())
    }

    /// Short identifier used in reports.
    fn backend_id(&self) -> String {
        let (kind, model) = self.source();
        format!("{kind}:{model}")
    }
}

pub type BackendHandle = Arc<dyn ChatBackend>;

/// Settings for building a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_transport_retries: u32,
    pub script: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint: None,
            model_name: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 120,
            max_transport_retries: 3,
            script: None,
            cache_dir: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::Http => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(BackendError::Config(
                        "http backend requires an endpoint".into(),
                    ));
                }
                if self.model_name.is_empty() {
                    return Err(BackendError::Config(
                        "http backend requires a model name".into(),
                    ));
                }
            }
            BackendKind::Scripted => {
                if self.script.is_none() {
                    return Err(BackendError::Config(
                        "scripted backend requires a response table".into(),
                    ));
                }
            }
            BackendKind::Replay => {
                if self.cache_dir.is_none() {
                    return Err(BackendError::Config(
                        "replay backend requires a cache directory".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    /// Builds an HTTP or scripted backend. Replay backends are built with
    /// [`ReplayBackend::new`] since they need the recorded source kind.
    pub fn build(&self) -> Result<BackendHandle, BackendError> {
        self.validate()?;
        match self.kind {
            BackendKind::Http => {
                let api_key = std::env::var(&self.api_key_env)
                    .ok()
                    .filter(|k| !k.is_empty());
                Ok(Arc::new(HttpBackend::new(
                    self.endpoint.clone().unwrap_or_default(),
                    self.model_name.clone(),
                    api_key,
                    self.timeout(),
                    self.max_transport_retries,
                )))
            }
            BackendKind::Scripted => {
                let path = self.script.as_ref().expect("validated");
                let table = ScriptTable::load(path)?;
                let model = if self.model_name.is_empty() {
                    "scripted".to_string()
                } else {
                    self.model_name.clone()
                };
                Ok(Arc::new(ScriptedBackend::new(table, model)))
            }
            BackendKind::Replay => Err(BackendError::Config(
                "replay backends wrap a recorded source; use ReplayBackend::new".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn empty_request() -> ChatRequest {
        ChatRequest {
            system_text: String::new(),
            user_text: String::new(),
            image: None,
            temperature: 0.0,
            seed: None,
            model_name: String::new(),
        }
    }

    #[test]
    fn canonical_form_is_sorted_and_compact() {
        assert_eq!(
            empty_request().canonical(),
            r#"{"image":null,"model":"","seed":null,"system":"","temperature":"0.0","user":""}"#
        );
    }

    #[test]
    fn empty_request_key_is_pinned() {
        // Pinned on first implementation; a change here invalidates every
        // recorded cache.
        assert_eq!(
            cache_key(&empty_request(), BackendKind::Http, ""),
            "e414c061b5d9ec14b34159b773fba3d8e801045a58a218858e7fd2e84cbe8e83"
        );
    }

    #[test]
    fn keys_are_deterministic_and_field_sensitive() {
        let a = empty_request();
        assert_eq!(
            cache_key(&a, BackendKind::Http, "m"),
            cache_key(&a.clone(), BackendKind::Http, "m")
        );
        let mut b = a.clone();
        b.temperature = 0.7;
        assert_ne!(
            cache_key(&a, BackendKind::Http, "m"),
            cache_key(&b, BackendKind::Http, "m")
        );
        assert_ne!(
            cache_key(&a, BackendKind::Http, "m"),
            cache_key(&a, BackendKind::Scripted, "m")
        );
        assert_ne!(
            cache_key(&a, BackendKind::Http, "m"),
            cache_key(&a, BackendKind::Http, "n")
        );
    }

    #[test]
    fn config_requirements() {
        let mut cfg = BackendConfig::default();
        assert!(cfg.validate().is_err());
        cfg.endpoint = Some("http://localhost:1".into());
        assert!(cfg.validate().is_err());
        cfg.model_name = "m".into();
        assert!(cfg.validate().is_ok());
        let scripted = BackendConfig {
            kind: BackendKind::Scripted,
            ..BackendConfig::default()
        };
        assert!(scripted.validate().is_err());
        let replay = BackendConfig {
            kind: BackendKind::Replay,
            ..BackendConfig::default()
        };
        assert!(replay.validate().is_err());
    }

    fn arb_request() -> impl Strategy<Value = ChatRequest> {
        (
            "\\PC{0,20}",
            "\\PC{0,20}",
            0.0f64..2.0,
            proptest::option::of(any::<u64>()),
            "[a-z0-9-]{0,8}",
            proptest::option::of(proptest::collection::vec(any::<u8>(), 0..16)),
        )
            .prop_map(
                |(system_text, user_text, temperature, seed, model_name, img)| {
                    let image = img.map(|mut tail| {
                        let mut bytes = b"\x89PNG\r\n\x1a\n".to_vec();
                        bytes.append(&mut tail);
                        ImageRef::from_bytes(bytes).unwrap()
                    });
                    ChatRequest {
                        system_text,
                        user_text,
                        image,
                        temperature,
                        seed,
                        model_name,
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn canonical_form_is_injective(a in arb_request(), b in arb_request()) {
            prop_assert_eq!(a == b, a.canonical() == b.canonical());
        }

        #[test]
        fn perturbing_any_field_changes_the_bytes(r in arb_request(), field in 0usize..6) {
            let mut p = r.clone();
            match field {
                0 => p.system_text.push('x'),
                1 => p.user_text.push('x'),
                2 => p.temperature += 0.125,
                3 => p.seed = Some(p.seed.map_or(0, |s| s.wrapping_add(1))),
                4 => p.model_name.push('x'),
                _ => {
                    let mut bytes = p.image.as_ref().map_or(b"\x89PNG\r\n\x1a\n".to_vec(), |i| i.bytes().to_vec());
                    bytes.push(0);
                    p.image = Some(ImageRef::from_bytes(bytes).unwrap());
                }
            }
            prop_assert_ne!(r.canonical(), p.canonical());
        }
    }
}
