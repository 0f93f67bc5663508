use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labeling::prompt::TemplateId;

/// Text-completion backend used by the labeling stages.
pub trait AnnotatorClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub template: TemplateId,
    pub hash: String,
    pub attempt: u32,
    pub prompt: String,
    pub response: String,
}

type Key = (TemplateId, String, u32);

/// Append-only request/response log. Entries already present are replayed
/// instead of calling the client, which makes labeling resumable.
#[derive(Debug, Default)]
pub struct AuditLog {
    path: Option<PathBuf>,
    file: Option<File>,
    entries: HashMap<Key, String>,
}

pub fn content_hash(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: AuditRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
                entries.insert((r.template, r.hash, r.attempt), r.response);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            entries,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, key: &Key) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn record(&mut self, r: AuditRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_string(&r)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.entries.insert((r.template, r.hash, r.attempt), r.response);
        Ok(())
    }
}

/// A client together with its retry policy and audit log.
pub struct Annotator<'c> {
    client: &'c dyn AnnotatorClient,
    pub policy: RetryPolicy,
    log: Mutex<AuditLog>,
    calls: AtomicUsize,
}

impl<'c> Annotator<'c> {
    pub fn new(client: &'c dyn AnnotatorClient, policy: RetryPolicy, log: AuditLog) -> Self {
        Self {
            client,
            policy,
            log: Mutex::new(log),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of requests that actually reached the client.
    pub fn client_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn into_log(self) -> AuditLog {
        self.log.into_inner().unwrap_or_else(|e| e.into_inner())
    }

    /// Response for attempt `attempt` of `prompt`. Transport failures are
    /// retried under the policy; the response is logged before it is returned.
    pub fn ask(&self, template: TemplateId, prompt: &str, attempt: u32) -> Result<String> {
        let key = (template, content_hash(prompt), attempt);
        if let Some(r) = self.log.lock().expect("audit log").lookup(&key) {
            return Ok(r.to_string());
        }
        let mut last = None;
        for i in 0..self.policy.max_attempts.max(1) {
            if i > 0 && self.policy.backoff_ms > 0 {
                thread::sleep(Duration::from_millis(self.policy.backoff_ms << (i - 1)));
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            match self.client.complete(prompt) {
                Ok(response) => {
                    self.log.lock().expect("audit log").record(AuditRecord {
                        template,
                        hash: key.1,
                        attempt,
                        prompt: prompt.to_string(),
                        response: response.clone(),
                    })?;
                    return Ok(response);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Client(match last {
            Some(e) => format!("{template} request failed after {} attempts: {e}", self.policy.max_attempts),
            None => format!("{template} request failed"),
        }))
    }
}

type Responder = dyn Fn(&str) -> Result<String> + Send + Sync;

/// Client answering from a closure; counts its calls.
pub struct MockClient {
    responder: Box<Responder>,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn new(f: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    /// Always replies with `reply`.
    pub fn constant(reply: &str) -> Self {
        let reply = reply.to_string();
        Self::new(move |_| Ok(reply.clone()))
    }

    /// Replies from `replies` in order, then repeats the last one.
    pub fn scripted(replies: &[&str]) -> Self {
        let replies: Vec<String> = replies.iter().map(|s| s.to_string()).collect();
        let next = AtomicUsize::new(0);
        Self::new(move |_| {
            let i = next.fetch_add(1, Ordering::Relaxed).min(replies.len().saturating_sub(1));
            replies
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Client("no scripted reply".into()))
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl AnnotatorClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.responder)(prompt)
    }
}
