use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, Completion};

/// Canned responses keyed by user text.
///
/// Lookup order: an exact match on the whole user text, then the first
/// `~substring` key (in table order) contained in the user text, then the `*`
/// wildcard. The JSON form is an object whose keys keep their file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptTable {
    entries: Vec<(String, String)>,
}

impl ScriptTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, response: impl Into<String>) -> Self {
        self.entries.push((key.into(), response.into()));
        self
    }

    /// Convenience for a table answering every request the same way.
    pub fn wildcard(response: impl Into<String>) -> Self {
        Self::new().with("*", response)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("script table {}: {e}", path.display())))
    }

    pub fn lookup(&self, user_text: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == user_text)
            .or_else(|| {
                self.entries.iter().find(|(k, _)| {
                    k.strip_prefix('~')
                        .is_some_and(|needle| user_text.contains(needle))
                })
            })
            .or_else(|| self.entries.iter().find(|(k, _)| k == "*"))
            .map(|(_, v)| v.as_str())
    }
}

impl<'de> Deserialize<'de> for ScriptTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct OrderedMap;

        impl<'de> Visitor<'de> for OrderedMap {
            type Value = ScriptTable;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping request keys to response text")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<ScriptTable, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    entries.push((k, v));
                }
                Ok(ScriptTable { entries })
            }
        }

        d.deserialize_map(OrderedMap)
    }
}

/// Deterministic backend answering from a [`ScriptTable`].
#[derive(Debug)]
pub struct ScriptedBackend {
    table: ScriptTable,
    model_name: String,
    requests: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable, model_name: impl Into<String>) -> Self {
        Self {
            table,
            model_name: model_name.into(),
            requests: AtomicU64::new(0),
        }
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.table
            .lookup(&request.user_text)
            .map(Completion::fresh)
            .ok_or(BackendError::NoScriptedResponse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> ChatRequest {
        ChatRequest {
            system_text: String::new(),
            user_text: user.into(),
            image: None,
            temperature: 0.0,
            seed: None,
            model_name: "scripted".into(),
        }
    }

    #[test]
    fn wildcard_answers_anything() {
        let b = ScriptedBackend::new(ScriptTable::wildcard("FINAL: YES"), "scripted");
        assert_eq!(b.complete(&req("anything")).unwrap().text, "FINAL: YES");
        assert_eq!(b.requests(), 1);
    }

    #[test]
    fn lookup_precedence() {
        let t: ScriptTable = serde_json::from_str(
            r#"{"*": "w", "~beta": "b", "~alpha": "a", "exact alpha beta": "e"}"#,
        )
        .unwrap();
        assert_eq!(t.lookup("exact alpha beta"), Some("e"));
        assert_eq!(t.lookup("x alpha beta"), Some("b"));
        assert_eq!(t.lookup("x alpha"), Some("a"));
        assert_eq!(t.lookup("none"), Some("w"));
        let b = ScriptedBackend::new(ScriptTable::new().with("k", "v"), "m");
        assert!(matches!(
            b.complete(&req("other")),
            Err(BackendError::NoScriptedResponse)
        ));
    }
}
