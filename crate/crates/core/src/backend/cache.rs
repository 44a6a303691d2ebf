//! Content-addressed response cache.
//!
//! Layout under the cache root:
//!
//! ```text
//! entries/<key>.json   one immutable entry per request
//! journal.jsonl        one line per request served while recording
//! tmp/                 staging area for atomic writes
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    key_from_canonical, BackendError, BackendHandle, BackendKind, ChatBackend, ChatRequest,
    Completion, TokenUsage,
};

const ENTRIES_DIR: &str = "entries";
const TMP_DIR: &str = "tmp";
const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub backend: BackendKind,
    pub model: String,
    pub request_canonical: String,
    pub response_text: String,
    pub response_sha256: String,
    pub timestamp: String,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub key: String,
    /// `record` when the backend was called, `hit` when an entry already existed.
    pub event: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub entries: usize,
    /// Keys (or file names) with the reason they failed.
    pub bad: Vec<(String, String)>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.bad.is_empty()
    }
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    journal: Mutex<()>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    /// Opens a cache, creating the directory layout if needed.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let root = root.into();
        for dir in [root.join(ENTRIES_DIR), root.join(TMP_DIR)] {
            fs::create_dir_all(&dir).map_err(|source| BackendError::Io { path: dir, source })?;
        }
        Ok(Self::at(root))
    }

    /// Opens an existing cache read-only; nothing is created.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(BackendError::Io {
                path: root,
                source: std::io::Error::new(ErrorKind::NotFound, "cache directory does not exist"),
            });
        }
        Ok(Self::at(root))
    }

    fn at(root: PathBuf) -> Self {
        Self {
            root,
            journal: Mutex::new(()),
            key_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.root.join(ENTRIES_DIR).join(format!("{key}.json"))
    }

    pub fn journal_path(&self) -> PathBuf {
        self.root.join(JOURNAL_FILE)
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> BackendError + '_ {
        move |source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, BackendError> {
        let path = self.entry_path(key);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Self::io(&path)(e)),
        };
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|e| {
            BackendError::MalformedResponse(format!("corrupt cache entry {}: {e}", path.display()))
        })?;
        Ok(Some(entry))
    }

    /// Writes an entry unless one already exists for its key, and returns the
    /// entry that is durable afterwards.
    pub fn put(&self, entry: CacheEntry) -> Result<CacheEntry, BackendError> {
        let target = self.entry_path(&entry.key);
        let tmp_dir = self.root.join(TMP_DIR);
        let mut tmp = tempfile::NamedTempFile::new_in(&tmp_dir).map_err(Self::io(&tmp_dir))?;
        let json = serde_json::to_string_pretty(&entry).expect("cache entry serializes");
        tmp.write_all(json.as_bytes())
            .and_then(|_| tmp.write_all(b"\n"))
            .and_then(|_| tmp.as_file().sync_all())
            .map_err(Self::io(tmp.path()))?;
        match tmp.persist_noclobber(&target) {
            Ok(_) => Ok(entry),
            Err(e) if e.error.kind() == ErrorKind::AlreadyExists => {
                self.get(&entry.key)?.ok_or_else(|| BackendError::Io {
                    path: target.clone(),
                    source: e.error,
                })
            }
            Err(e) => Err(Self::io(&target)(e.error)),
        }
    }

    pub fn append_journal(&self, key: &str, event: &str) -> Result<(), BackendError> {
        let record = JournalRecord {
            key: key.to_string(),
            event: event.to_string(),
            timestamp: now(),
        };
        let mut line = serde_json::to_string(&record).expect("journal record serializes");
        line.push('\n');
        let path = self.journal_path();
        let _guard = self.journal.lock().unwrap_or_else(|p| p.into_inner());
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(Self::io(&path))?;
        file.write_all(line.as_bytes()).map_err(Self::io(&path))
    }

    pub fn journal(&self) -> Result<Vec<JournalRecord>, BackendError> {
        let path = self.journal_path();
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Self::io(&path)(e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    BackendError::MalformedResponse(format!("journal line {}: {e}", i + 1))
                })
            })
            .collect()
    }

    /// Entry keys in sorted order.
    pub fn keys(&self) -> Result<Vec<String>, BackendError> {
        let dir = self.root.join(ENTRIES_DIR);
        let read = match fs::read_dir(&dir) {
            Ok(read) => read,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Self::io(&dir)(e)),
        };
        let mut keys = Vec::new();
        for item in read {
            let item = item.map_err(Self::io(&dir))?;
            let name = item.file_name().to_string_lossy().into_owned();
            if let Some(key) = name.strip_suffix(".json") {
                keys.push(key.to_string());
            }
        }
        keys.sort();
        Ok(keys)
    }

    /// Re-derives every entry's key and response digest.
    pub fn verify(&self) -> Result<VerifyReport, BackendError> {
        let mut report = VerifyReport::default();
        for key in self.keys()? {
            report.entries += 1;
            let path = self.entry_path(&key);
            let text = fs::read_to_string(&path).map_err(Self::io(&path));
            let entry = text.and_then(|t| {
                serde_json::from_str::<CacheEntry>(&t)
                    .map_err(|e| BackendError::MalformedResponse(e.to_string()))
            });
            let problem = match entry {
                Err(e) => Some(format!("unreadable: {e}")),
                Ok(entry) => {
                    let derived =
                        key_from_canonical(&entry.request_canonical, entry.backend, &entry.model);
                    if entry.key != key {
                        Some(format!("file name does not match stored key {}", entry.key))
                    } else if derived != key {
                        Some(format!("request digest mismatch (derived {derived})"))
                    } else if sha256_hex(&entry.response_text) != entry.response_sha256 {
                        Some("response digest mismatch".to_string())
                    } else {
                        None
                    }
                }
            };
            if let Some(reason) = problem {
                report.bad.push((key, reason));
            }
        }
        if let Err(e) = self.journal() {
            report.bad.push((JOURNAL_FILE.to_string(), e.to_string()));
        }
        Ok(report)
    }

    /// Removes entries the journal never mentions and stale staging files.
    /// Returns the number of entries removed.
    pub fn gc(&self) -> Result<usize, BackendError> {
        let referenced: BTreeSet<String> = self.journal()?.into_iter().map(|r| r.key).collect();
        let mut removed = 0;
        for key in self.keys()? {
            if !referenced.contains(&key) {
                let path = self.entry_path(&key);
                fs::remove_file(&path).map_err(Self::io(&path))?;
                removed += 1;
            }
        }
        let tmp = self.root.join(TMP_DIR);
        if let Ok(read) = fs::read_dir(&tmp) {
            for item in read.flatten() {
                let _ = fs::remove_file(item.path());
            }
        }
        Ok(removed)
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(key.to_string()).or_default().clone()
    }
}

/// Serves requests from the cache when possible and records fresh responses.
pub struct RecordingBackend {
    inner: BackendHandle,
    cache: Arc<ResponseCache>,
}

impl RecordingBackend {
    pub fn new(inner: BackendHandle, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }
}

impl ChatBackend for RecordingBackend {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn source(&self) -> (BackendKind, &str) {
        self.inner.source()
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let (kind, model) = self.inner.source();
        let canonical = request.canonical();
        let key = key_from_canonical(&canonical, kind, model);
        let lock = self.cache.key_lock(&key);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());

        if let Some(entry) = self.cache.get(&key)? {
            self.cache.append_journal(&key, "hit")?;
            return Ok(Completion {
                text: entry.response_text,
                cached: true,
                usage: entry.usage,
            });
        }
        let completion = self.inner.complete(request)?;
        let entry = self.cache.put(CacheEntry {
            key: key.clone(),
            backend: kind,
            model: model.to_string(),
            request_canonical: canonical,
            response_sha256: sha256_hex(&completion.text),
            response_text: completion.text,
            timestamp: now(),
            usage: completion.usage,
        })?;
        self.cache.append_journal(&key, "record")?;
        Ok(Completion {
            text: entry.response_text,
            cached: false,
            usage: entry.usage,
        })
    }
}

/// Answers only from the cache; never contacts a model.
pub struct ReplayBackend {
    cache: Arc<ResponseCache>,
    source_kind: BackendKind,
    model_name: String,
}

impl ReplayBackend {
    /// `source_kind` and `model_name` describe the backend the cache was
    /// recorded from; they are part of every key.
    pub fn new(
        cache: Arc<ResponseCache>,
        source_kind: BackendKind,
        model_name: impl Into<String>,
    ) -> Self {
        Self {
            cache,
            source_kind,
            model_name: model_name.into(),
        }
    }
}

impl ChatBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn source(&self) -> (BackendKind, &str) {
        (self.source_kind, &self.model_name)
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let key = key_from_canonical(&request.canonical(), self.source_kind, &self.model_name);
        match self.cache.get(&key)? {
            Some(entry) => Ok(Completion {
                text: entry.response_text,
                cached: true,
                usage: entry.usage,
            }),
            None => Err(BackendError::CacheMiss { key }),
        }
    }
}
