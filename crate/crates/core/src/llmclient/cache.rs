//! On-disk response cache: one JSON file per request under a directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::Usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub cache_key: String,
    pub response_text: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("log"))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Returns the entry for `key`; unreadable or corrupt files count as a miss.
    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let raw = fs::read(self.entry_path(key)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&raw).ok()?;
        (entry.cache_key == key).then_some(entry)
    }

    /// Writes an entry unless one already exists for its key. Entries are
    /// never rewritten.
    pub fn put(&self, entry: &CacheEntry) -> std::io::Result<()> {
        let path = self.entry_path(&entry.cache_key);
        if path.exists() {
            return Ok(());
        }
        let bytes = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        atomic_write(&path, &bytes)
    }

    /// Stores a request/response exchange under `log/` for inspection.
    pub fn log_exchange(&self, key: &str, exchange: &serde_json::Value) -> std::io::Result<()> {
        let path = self.dir.join("log").join(format!("{key}.json"));
        let bytes = serde_json::to_vec_pretty(exchange).expect("log serializes");
        atomic_write(&path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str, text: &str) -> CacheEntry {
        CacheEntry {
            cache_key: key.into(),
            response_text: text.into(),
            created_at: 1,
            usage: Usage::default(),
        }
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert!(cache.get("abc").is_none());
        cache.put(&entry("abc", "hello")).unwrap();
        assert_eq!(cache.get("abc").unwrap().response_text, "hello");
    }

    #[test]
    fn entries_are_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        cache.put(&entry("k", "first")).unwrap();
        cache.put(&entry("k", "second")).unwrap();
        assert_eq!(cache.get("k").unwrap().response_text, "first");
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        fs::write(dir.path().join("bad.json"), b"{not json").unwrap();
        assert!(cache.get("bad").is_none());
    }
}
