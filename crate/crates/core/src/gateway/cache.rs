//! On-disk response cache: `<root>/<provider_id>/<key>.raw` holds the
//! verbatim response, `<key>.meta` a small JSON sidecar.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub const CACHE_DIR_ENV: &str = "PLATELINE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub key: String,
    pub provider_id: String,
    pub model: String,
    pub template_version: String,
    pub class_id: String,
    pub fetched_at_unix: u64,
    /// Wall time of the original request; replayed on cache hits.
    pub latency_ms: f64,
}

#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    /// `$PLATELINE_CACHE_DIR`, else `$HOME/.cache/plateline`, else `.plateline-cache`.
    pub fn default_root() -> PathBuf {
        if let Some(dir) = std::env::var_os(CACHE_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(dir);
        }
        match std::env::var_os("HOME").filter(|v| !v.is_empty()) {
            Some(home) => PathBuf::from(home).join(".cache").join("plateline"),
            None => PathBuf::from(".plateline-cache"),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn provider_dir(&self, provider_id: &str) -> PathBuf {
        self.root.join(provider_id)
    }

    fn paths(&self, provider_id: &str, key: &str) -> (PathBuf, PathBuf) {
        let dir = self.provider_dir(provider_id);
        (dir.join(format!("{key}.raw")), dir.join(format!("{key}.meta")))
    }

    pub fn contains(&self, provider_id: &str, key: &str) -> bool {
        let (raw, meta) = self.paths(provider_id, key);
        raw.is_file() && meta.is_file()
    }

    pub fn load(&self, provider_id: &str, key: &str) -> io::Result<Option<(String, CacheMeta)>> {
        let (raw_path, meta_path) = self.paths(provider_id, key);
        if !raw_path.is_file() || !meta_path.is_file() {
            return Ok(None);
        }
        let raw = fs::read(&raw_path)?;
        let raw = String::from_utf8(raw).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let meta: CacheMeta = serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        Ok(Some((raw, meta)))
    }

    /// Writes the raw bytes, then the sidecar; each lands via rename so a
    /// reader never sees a partial file.
    pub fn store(&self, raw: &str, meta: &CacheMeta) -> io::Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.provider_dir(&meta.provider_id);
        fs::create_dir_all(&dir)?;
        let (raw_path, meta_path) = self.paths(&meta.provider_id, &meta.key);
        write_atomic(&raw_path, raw.as_bytes())?;
        let meta_json = serde_json::to_vec_pretty(meta).map_err(io::Error::other)?;
        write_atomic(&meta_path, &meta_json)
    }

    pub fn list(&self, provider_id: &str) -> io::Result<Vec<CacheMeta>> {
        let dir = self.provider_dir(provider_id);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut metas = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "meta") {
                if let Ok(meta) = serde_json::from_slice::<CacheMeta>(&fs::read(&path)?) {
                    metas.push(meta);
                }
            }
        }
        metas.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(metas)
    }

    /// Removes every entry for `provider_id`; returns how many were removed.
    pub fn clear(&self, provider_id: &str) -> io::Result<usize> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.provider_dir(provider_id);
        if !dir.is_dir() {
            return Ok(0);
        }
        let mut removed = 0;
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            match path.extension().and_then(|e| e.to_str()) {
                Some("meta") => {
                    removed += 1;
                    fs::remove_file(&path)?;
                }
                Some("raw") | Some("tmp") => fs::remove_file(&path)?,
                _ => {}
            }
        }
        Ok(removed)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
