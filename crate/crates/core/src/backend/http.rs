use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, Completion, TokenUsage};

/// Exponential backoff between transport attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(500),
            max: Duration::from_secs(16),
        }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(16)).unwrap_or(u32::MAX);
        self.initial.saturating_mul(factor).min(self.max)
    }
}

/// Chat-completions client: `POST <endpoint>/chat/completions`.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model_name: String,
    api_key: Option<String>,
    max_transport_retries: u32,
    backoff: Backoff,
    attempts: AtomicU64,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("model_name", &self.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("max_transport_retries", &self.max_transport_retries)
            .finish()
    }
}

enum Attempt {
    Done(Completion),
    Retry {
        error: BackendError,
        after: Option<Duration>,
    },
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model_name: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        max_transport_retries: u32,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            api_key,
            max_transport_retries,
            backoff: Backoff::default(),
            attempts: AtomicU64::new(0),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    /// Number of HTTP requests sent so far.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.trim_end_matches('/'))
    }

    /// JSON body sent for `request`.
    pub fn request_body(request: &ChatRequest) -> Value {
        let mut user_content = vec![json!({"type": "text", "text": request.user_text})];
        if let Some(image) = &request.image {
            user_content.push(json!({"type": "image_url", "image_url": {"url": image.data_url()}}));
        }
        let mut body = json!({
            "model": request.model_name,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": user_content},
            ],
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &str) -> Result<Attempt, BackendError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let mut req = self
            .agent
            .post(&self.url())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(resp) => resp,
            Err(e) => {
                return Ok(Attempt::Retry {
                    error: BackendError::Transport(e.to_string()),
                    after: None,
                })
            }
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = match resp.body_mut().read_to_string() {
            Ok(text) => text,
            Err(e) if (200..300).contains(&status) => {
                return Ok(Attempt::Retry {
                    error: BackendError::Transport(format!("reading body: {e}")),
                    after: None,
                })
            }
            Err(_) => String::new(),
        };
        match status {
            200..=299 => parse_completion(&text).map(Attempt::Done),
            401 | 403 => Err(BackendError::Auth(format!(
                "HTTP {status}: {}",
                snippet(&text)
            ))),
            429 => Ok(Attempt::Retry {
                error: BackendError::RateLimitExhausted { attempts: 0 },
                after: retry_after,
            }),
            408 | 500..=599 => Ok(Attempt::Retry {
                error: BackendError::Transport(format!("HTTP {status}: {}", snippet(&text))),
                after: None,
            }),
            _ => Err(BackendError::Transport(format!(
                "HTTP {status}: {}",
                snippet(&text)
            ))),
        }
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

fn parse_completion(text: &str) -> Result<Completion, BackendError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| BackendError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let content = value.pointer("/choices/0/message/content").ok_or_else(|| {
        BackendError::MalformedResponse("missing choices[0].message.content".into())
    })?;
    let text = match content {
        Value::String(s) => s.clone(),
        // some servers return content parts even for plain replies
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        other => {
            return Err(BackendError::MalformedResponse(format!(
                "message content is {other}"
            )))
        }
    };
    let usage = value.get("usage").map(|u| TokenUsage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u
            .get("completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    });
    Ok(Completion {
        text,
        cached: false,
        usage,
    })
}

impl ChatBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let body = Self::request_body(request).to_string();
        let total = self.max_transport_retries + 1;
        let mut last = None;
        for attempt in 0..total {
            match self.attempt(&body)? {
                Attempt::Done(c) => return Ok(c),
                Attempt::Retry { error, after } => {
                    if attempt + 1 < total {
                        let wait = after
                            .map(|a| a.min(self.backoff.max))
                            .unwrap_or_else(|| self.backoff.delay(attempt));
                        std::thread::sleep(wait);
                    }
                    last = Some(error);
                }
            }
        }
        Err(match last {
            Some(BackendError::RateLimitExhausted { .. }) => {
                BackendError::RateLimitExhausted { attempts: total }
            }
            Some(e) => e,
            None => BackendError::Transport("no attempts made".into()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageRef;

    #[test]
    fn backoff_doubles_and_caps() {
        let b = Backoff {
            initial: Duration::from_millis(100),
            max: Duration::from_millis(500),
        };
        assert_eq!(b.delay(0), Duration::from_millis(100));
        assert_eq!(b.delay(1), Duration::from_millis(200));
        assert_eq!(b.delay(2), Duration::from_millis(400));
        assert_eq!(b.delay(3), Duration::from_millis(500));
        assert_eq!(b.delay(40), Duration::from_millis(500));
    }

    #[test]
    fn body_shape() {
        let img = ImageRef::from_bytes(b"\x89PNG\r\n\x1a\nxx".to_vec()).unwrap();
        let r = ChatRequest {
            system_text: "sys".into(),
            user_text: "usr".into(),
            image: Some(img),
            temperature: 0.0,
            seed: None,
            model_name: "m".into(),
        };
        let body = HttpBackend::request_body(&r);
        assert_eq!(body["model"], "m");
        assert!(body.get("seed").is_none());
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][0]["content"], "sys");
        assert_eq!(body["messages"][1]["content"][0]["text"], "usr");
        assert!(body["messages"][1]["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        let seeded = ChatRequest { seed: Some(7), ..r };
        assert_eq!(HttpBackend::request_body(&seeded)["seed"], 7);
    }

    #[test]
    fn completion_parsing() {
        let c = parse_completion(
            r#"{"choices":[{"message":{"role":"assistant","content":"FINAL: YES"}}],"usage":{"prompt_tokens":3,"completion_tokens":2}}"#,
        )
        .unwrap();
        assert_eq!(c.text, "FINAL: YES");
        assert_eq!(c.usage.unwrap().completion_tokens, 2);
        let parts = parse_completion(
            r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#,
        )
        .unwrap();
        assert_eq!(parts.text, "ab");
        assert!(matches!(
            parse_completion("nope"),
            Err(BackendError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_completion("{\"choices\":[]}"),
            Err(BackendError::MalformedResponse(_))
        ));
    }
}
