//! Content-addressed cache for backend calls.
//!
//! Keys hash the backend identity, the operation name and the content of
//! every input. Image inputs hash the file bytes when the locator names a
//! readable local file, and the locator string otherwise. Entries are JSON
//! files under a two-level directory fan-out, written via temp file + rename
//! so concurrent workers never observe a partial entry.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::ImageRef;

#[derive(Debug)]
pub struct CallCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

/// Builder for a cache key.
pub struct CacheKey {
    hasher: Sha256,
}

impl CacheKey {
    pub fn new(identity: &str, operation: &str) -> Self {
        let mut k = CacheKey {
            hasher: Sha256::new(),
        };
        k.push_str(identity);
        k.push_str(operation);
        k
    }

    pub fn push_str(&mut self, s: &str) -> &mut Self {
        self.hasher.update((s.len() as u64).to_le_bytes());
        self.hasher.update(s.as_bytes());
        self
    }

    pub fn push_image(&mut self, image: &ImageRef) -> &mut Self {
        let digest = image_content_hash(image);
        self.push_str(&digest)
    }

    pub fn push_json<T: Serialize>(&mut self, value: &T) -> &mut Self {
        let s = serde_json::to_string(value).expect("cache key input serializes");
        self.push_str(&s)
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

pub fn image_content_hash(image: &ImageRef) -> String {
    let path = Path::new(image.as_str());
    match fs::read(path) {
        Ok(bytes) => format!("file:{}", hex::encode(Sha256::digest(&bytes))),
        Err(_) => format!("locator:{}", image.as_str()),
    }
}

impl CallCache {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(CallCache {
            root,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let text = fs::read_to_string(self.entry_path(key)).ok()?;
        match serde_json::from_str(&text) {
            Ok(v) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(v)
            }
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> std::io::Result<()> {
        let path = self.entry_path(key);
        let dir = path.parent().expect("entry has a parent directory");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile_in(dir)?;
        tmp.1.write_all(serde_json::to_string(value)?.as_bytes())?;
        tmp.1.sync_all()?;
        drop(tmp.1);
        fs::rename(&tmp.0, &path)
    }

    /// Looks up `key`, computing and storing the value on a miss.
    pub fn get_or_compute<T, E, F>(&self, key: &str, compute: F) -> Result<T, E>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, E>,
    {
        if let Some(v) = self.get(key) {
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = compute()?;
        if let Err(e) = self.put(key, &v) {
            log::warn!("failed to write cache entry {key}: {e}");
        }
        Ok(v)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
    let file = fs::File::create(&path)?;
    Ok((path, file))
}
