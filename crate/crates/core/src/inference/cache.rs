//! Append-only JSONL response cache.
//!
//! Entries are keyed by [`cache_key`]. The whole file is loaded on open; new
//! entries are appended and flushed one line at a time, so a run that dies
//! midway loses at most the line being written.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{BackendSpec, ModelSpec};
use crate::digest::FieldHasher;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    pub vignette_id: String,
    pub variant_id: u32,
    pub raw_text: String,
    pub ts: String,
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

/// Digest over the backend identity, chat template, sampling parameters and
/// the exact wire text.
pub fn cache_key(spec: &ModelSpec, wire_text: &str) -> String {
    let identity = match &spec.backend {
        BackendSpec::Http { model_id, .. } => format!("http:{model_id}"),
        BackendSpec::Mock { profile } => format!(
            "mock:{}",
            serde_json::to_string(profile).expect("profile serializes")
        ),
    };
    let s = &spec.sampling;
    FieldHasher::new()
        .field("cinorms-cache-v1")
        .field(identity)
        .field(spec.chat_template_kind.as_str())
        .field(s.temperature.to_bits().to_le_bytes())
        .field(s.max_tokens.to_le_bytes())
        .field(match s.seed {
            Some(seed) => format!("seed:{seed}"),
            None => "seed:none".to_string(),
        })
        .field(wire_text)
        .finish_hex()
}

pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<BufWriter<File>>,
}

impl ResponseCache {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        let mut needs_newline = false;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            let mut line = String::new();
            while reader.read_line(&mut line)? > 0 {
                needs_newline = !line.ends_with('\n');
                match serde_json::from_str::<CacheEntry>(line.trim_end()) {
                    Ok(entry) => {
                        entries.insert(entry.key.clone(), entry);
                    }
                    Err(err) if !line.trim().is_empty() => {
                        tracing::warn!(path = %path.display(), %err, "skipping unreadable cache line");
                    }
                    Err(_) => {}
                }
                line.clear();
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = BufWriter::new(file);
        if needs_newline {
            // a torn last line must not swallow the next append
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(key)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, entry: CacheEntry) -> io::Result<()> {
        let line = serde_json::to_string(&entry).map_err(io::Error::other)?;
        {
            let mut w = self.writer.lock().expect("cache writer poisoned");
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(entry.key.clone(), entry);
        Ok(())
    }
}
