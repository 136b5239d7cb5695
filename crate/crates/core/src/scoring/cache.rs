//! Content-addressed score cache persisted as append-only JSON lines.
//!
//! Each line is `{key_hash, backend_id, prefix_hash, target_hash, tokens}`
//! where the component hashes are SHA-256 of the exact prefix and target
//! bytes and `key_hash` is SHA-256 over `backend_id`, `prefix_hash` and
//! `target_hash` separated by NUL bytes. Lines whose key does not
//! recompute, or that fail to parse, are skipped with a warning.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendDescriptor, ScoreError, ScoreRequest, ScoredToken, SequenceScore};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn key_hash(backend_id: &str, prefix_hash: &str, target_hash: &str) -> String {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0u8]);
    h.update(prefix_hash.as_bytes());
    h.update([0u8]);
    h.update(target_hash.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheLine {
    pub key_hash: String,
    pub backend_id: String,
    pub prefix_hash: String,
    pub target_hash: String,
    pub tokens: Vec<ScoredToken>,
}

impl CacheLine {
    pub fn new(backend_id: &str, prefix: &str, target: &str, score: &SequenceScore) -> Self {
        let prefix_hash = sha256_hex(prefix.as_bytes());
        let target_hash = sha256_hex(target.as_bytes());
        Self {
            key_hash: key_hash(backend_id, &prefix_hash, &target_hash),
            backend_id: backend_id.to_string(),
            prefix_hash,
            target_hash,
            tokens: score.tokens.clone(),
        }
    }

    fn is_consistent(&self) -> bool {
        self.key_hash == key_hash(&self.backend_id, &self.prefix_hash, &self.target_hash)
    }
}

#[derive(Debug, Default)]
pub struct ScoreCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, Vec<ScoredToken>>>,
    file: Mutex<Option<File>>,
    corrupt_lines: usize,
}

impl ScoreCache {
    /// Cache that is never persisted.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; new entries are appended to it.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut entries = HashMap::new();
        let mut corrupt_lines = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(entry) if entry.is_consistent() => {
                        entries.entry(entry.key_hash).or_insert(entry.tokens);
                    }
                    Ok(_) => {
                        corrupt_lines += 1;
                        log::warn!("{}:{}: cache key hash mismatch, entry ignored", path.display(), n + 1);
                    }
                    Err(e) => {
                        corrupt_lines += 1;
                        log::warn!("{}:{}: unreadable cache entry ignored: {e}", path.display(), n + 1);
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            file: Mutex::new(Some(file)),
            corrupt_lines,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Lines skipped while loading.
    pub fn corrupt_lines(&self) -> usize {
        self.corrupt_lines
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, backend_id: &str, prefix: &str, target: &str) -> Option<SequenceScore> {
        let key = CacheLine::new(backend_id, prefix, target, &SequenceScore { tokens: vec![] }).key_hash;
        self.entries
            .read()
            .expect("cache lock")
            .get(&key)
            .map(|tokens| SequenceScore { tokens: tokens.clone() })
    }

    /// Stores a score. A key that is already present is left untouched.
    /// Scores with non-finite logprobs are not cached.
    pub fn put(&self, backend_id: &str, prefix: &str, target: &str, score: &SequenceScore) -> io::Result<()> {
        if score.logprobs().any(|lp| !lp.is_finite()) {
            log::warn!("not caching a score with non-finite logprobs");
            return Ok(());
        }
        let line = CacheLine::new(backend_id, prefix, target, score);
        let mut entries = self.entries.write().expect("cache lock");
        if entries.contains_key(&line.key_hash) {
            return Ok(());
        }
        if let Some(file) = self.file.lock().expect("cache file lock").as_mut() {
            let mut text = serde_json::to_string(&line).map_err(io::Error::other)?;
            text.push('\n');
            file.write_all(text.as_bytes())?;
            file.flush()?;
        }
        entries.insert(line.key_hash, line.tokens);
        Ok(())
    }
}

/// Backend wrapper that consults a [`ScoreCache`] before scoring.
pub struct Cached<B> {
    inner: B,
    cache: Arc<ScoreCache>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: Backend> Cached<B> {
    pub fn new(inner: B, cache: Arc<ScoreCache>) -> Self {
        Self { inner, cache, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ScoreCache {
        &self.cache
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

impl<B: Backend> Backend for Cached<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn score(&self, request: &ScoreRequest) -> Result<SequenceScore, ScoreError> {
        let id = self.inner.backend_id();
        if let Some(hit) = self.cache.get(id, &request.prefix, &request.target) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let score = self.inner.score(request)?;
        if let Err(e) = self.cache.put(id, &request.prefix, &request.target, &score) {
            log::warn!("cache write failed: {e}");
        }
        Ok(score)
    }
}
