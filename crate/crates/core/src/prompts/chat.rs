//! Preference extraction through an external chat-completion service, with
//! an on-disk cache keyed by a hash of the request.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::summarize::{PreferenceSummary, Summarizer, NO_PREFERENCES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    /// Hex SHA-256 of the serialized request.
    pub fn cache_key(&self) -> String {
        let body = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&body))
    }
}

/// Sends one request and returns the assistant's text.
pub trait ChatTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    user_id: String,
    text: String,
}

/// Append-only JSONL cache of responses.
#[derive(Debug)]
pub struct SummaryCache {
    path: Option<PathBuf>,
    entries: HashMap<String, String>,
}

impl SummaryCache {
    pub fn in_memory() -> Self {
        SummaryCache {
            path: None,
            entries: HashMap::new(),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
                entries.insert(rec.key, rec.text);
            }
        }
        Ok(SummaryCache {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn put(&mut self, key: String, user_id: &str, text: String) -> Result<()> {
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let rec = CacheRecord {
                key: key.clone(),
                user_id: user_id.to_string(),
                text: text.clone(),
            };
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        self.entries.insert(key, text);
        Ok(())
    }
}

const SYSTEM_PROMPT: &str = "You summarize a shopper's preferences from the reviews they wrote. \
Reply with one or two sentences describing what the shopper likes and dislikes.";

pub struct ChatSummarizer<T> {
    transport: T,
    model: String,
    cache: Mutex<SummaryCache>,
    hits: AtomicUsize,
    calls: AtomicUsize,
}

impl<T: ChatTransport> ChatSummarizer<T> {
    pub fn new(transport: T, model: impl Into<String>, cache: SummaryCache) -> Self {
        ChatSummarizer {
            transport,
            model: model.into(),
            cache: Mutex::new(cache),
            hits: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn request(&self, reviews: &[String]) -> ChatRequest {
        let mut body = String::from("Reviews:\n");
        for r in reviews.iter().filter(|r| !r.trim().is_empty()) {
            body.push_str("- ");
            body.push_str(r.trim());
            body.push('\n');
        }
        ChatRequest {
            model: self.model.clone(),
            temperature: 0.0,
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: SYSTEM_PROMPT.into(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: body,
                },
            ],
        }
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn service_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<T: ChatTransport> Summarizer for ChatSummarizer<T> {
    fn summarize(&self, user_id: &str, reviews: &[String]) -> Result<PreferenceSummary> {
        if reviews.iter().all(|r| r.trim().is_empty()) {
            return Ok(PreferenceSummary {
                user_id: user_id.to_string(),
                text: NO_PREFERENCES.to_string(),
            });
        }
        let request = self.request(reviews);
        let key = request.cache_key();
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some(text) = cache.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(PreferenceSummary {
                user_id: user_id.to_string(),
                text: text.to_string(),
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let text = self.transport.complete(&request)?;
        if text.trim().is_empty() {
            return Err(Error::External(format!("empty summary for user {user_id}")));
        }
        cache.put(key, user_id, text.clone())?;
        Ok(PreferenceSummary {
            user_id: user_id.to_string(),
            text,
        })
    }
}
